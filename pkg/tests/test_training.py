import json

import numpy as np
import pytest

from hmcvi import autodiff as ad
from hmcvi.bound import BoundOptions, elbo
from hmcvi.data import load_dataset
from hmcvi.models import load_checkpoint
from hmcvi.training import (
    ExperimentConfig, TrainingAborted, bound_gradients, evaluate, evaluate_bound, init_model, train,
)

SMALL = dict(hidden=[8], epochs=2, batch_size=32,
             dataset={"kind": "binary", "n": 96, "n_valid": 32, "dim": 12})


def cfg(**kw):
    return ExperimentConfig.from_dict({**SMALL, **kw})


def test_zero_steps_reduce_to_elbo():
    c = cfg()
    models, params = init_model(c, 12)
    x = load_dataset(c.dataset).train[:16]
    _, _, vals, _ = bound_gradients(models, params, x, np.random.default_rng(0), BoundOptions())
    ref = elbo(models, params, x, np.random.default_rng(0))
    assert np.array_equal(vals, ad.value(ref))


def test_training_is_deterministic(tmp_path):
    c = cfg(n_hmc=1, mass_mode="global", alpha_mode="learned")
    a, b = train(c, tmp_path / "a"), train(c, tmp_path / "b")
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_time"} for r in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,train_bound,valid_bound,accept_1,skipped,wall_time"
    assert {"best.npz", "last.npz", "config.json", "metrics.csv"} <= {p.name for p in (tmp_path / "a").iterdir()}


def test_training_improves_bound():
    res = train(cfg(epochs=15, lr=0.01))
    assert res.history[-1]["valid_bound"] > res.history[0]["valid_bound"]


def test_warm_start_with_zero_epochs_reproduces_source(tmp_path):
    src = train(cfg(), tmp_path / "src")
    c = cfg(n_hmc=0, mass_mode="global", epochs=0, warm_start=str(tmp_path / "src" / "last.npz"))
    models, params = init_model(c, 12)
    ds = load_dataset(c.dataset)
    a = evaluate_bound(src.models, src.params, ds.valid[None], 7)
    b = evaluate_bound(models, params, ds.valid[None], 7)
    assert a == b
    res = train(c, tmp_path / "dst")
    assert res.history == [] and all(np.array_equal(res.params[k], params[k]) for k in params)


def test_frozen_warm_start_keeps_networks(tmp_path):
    train(cfg(), tmp_path / "src")
    c = cfg(n_hmc=1, warm_start=str(tmp_path / "src" / "last.npz"), freeze_warm=True, epochs=1)
    res = train(c)
    src, _, _ = load_checkpoint(tmp_path / "src" / "last.npz")
    assert all(np.array_equal(res.params[k], src[k]) for k in src if k.startswith(("encoder", "decoder")))
    assert not np.array_equal(res.params["hmc.log_eps"], init_model(c, 12)[1]["hmc.log_eps"])


def test_config_round_trip_and_unknown_keys(tmp_path):
    c = cfg(n_hmc=3, grad_clip=100.0)
    (tmp_path / "c.json").write_text(json.dumps(c.to_dict()))
    assert ExperimentConfig.from_json(tmp_path / "c.json") == c
    with pytest.raises(KeyError):
        ExperimentConfig.from_dict({"n_hcm": 3})
    with pytest.raises(ValueError):
        ExperimentConfig(batch_size=0)


def test_evaluate_reports_consistent_numbers():
    c = cfg(n_hmc=2, accept_mode="simple", epochs=3, is_samples=500, is_probes=2)
    res = train(c)
    ds = load_dataset(c.dataset)
    m = evaluate(res.models, res.best_params, ds.valid, c, binary=True, n_nll=10)
    assert m["n_nll"] == 10 and len(m["accept_rates"]) == 2
    assert all(0 <= r <= 1 for r in m["accept_rates"])
    assert m["gap"] <= 3 * m["gap_se"]
    assert m["gap"] == pytest.approx(m["bound_nll_subset"] + m["nll"], abs=1e-9)


def test_stochastic_binarisation_path(tmp_path):
    from hmcvi.data import save_idx

    imgs = np.random.default_rng(0).integers(0, 256, (40, 28, 28), dtype=np.uint8)
    save_idx(tmp_path / "i.gz", imgs)
    c = ExperimentConfig.from_dict({"hidden": [4], "epochs": 1, "batch_size": 16, "eval_draws": 2,
                                    "dataset": {"kind": "idx", "images": str(tmp_path / "i.gz"), "n_valid": 8}})
    res = train(c)
    assert np.isfinite(res.best_valid)


def test_abort_after_non_finite_streak(monkeypatch):
    import hmcvi.training as tr

    def broken(*a, **k):
        raise ad.NonFiniteGradient("boom")

    monkeypatch.setattr(tr, "bound_gradients", broken)
    with pytest.raises(TrainingAborted):
        train(cfg(abort_streak=3, epochs=5))
    res = train(cfg(abort_streak=100, epochs=1))
    assert res.skipped == 3
