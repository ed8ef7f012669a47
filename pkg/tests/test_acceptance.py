"""Acceptance criteria, one test each, at full size.

Each test prints a PASS/FAIL line; the lines are repeated in the terminal
summary. The scaled MNIST comparison trains three models (about 17 minutes
on one CPU core) and needs the digit subset in ``data/`` (see demos/prepare_mnist.py).
"""
import time
from pathlib import Path

import numpy as np
import pytest

from hmcvi import checks
from hmcvi.data import load_dataset, synthetic_conjugate
from hmcvi.training import ExperimentConfig, evaluate, train

MNIST = Path(__file__).resolve().parents[1] / "data" / "images-idx3-ubyte.gz"


def timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t


def test_01_leapfrog_reversibility(record):
    err, dt = timed(checks.reversibility_error, 100, np.random.default_rng(101))
    assert record("1 leapfrog reversibility", err < 1e-9 and dt < 10, f"max err {err:.2e}, {dt:.1f}s")


def test_02_volume_preservation(record):
    errs, dt = timed(checks.volume_errors, 20, np.random.default_rng(102))
    worst = float(np.max(errs))
    assert record("2 volume preservation", worst < 1e-6 and dt < 30, f"max |det J - 1| {worst:.2e}, {dt:.1f}s")


def test_03_energy_error_order(record):
    (ratios, _), dt = timed(checks.energy_error_ratios)
    ok = all(3.5 <= r <= 4.5 for r in ratios) and len(ratios) == 3 and dt < 10
    assert record("3 energy error order", ok, f"ratios {np.round(ratios, 4).tolist()}, {dt:.1f}s")


def test_04_mass_rescaling(record):
    errs, dt = timed(checks.rescaling_errors, 20, np.random.default_rng(104))
    worst = float(np.max(errs))
    assert record("4 mass rescaling equivalence", worst < 1e-10 and dt < 10, f"max err {worst:.2e}, {dt:.1f}s")


def test_05_kernel_stationarity(record):
    res, dt = timed(checks.stationarity, 10_000, 5, np.random.default_rng(105))
    ok = min(res.ks_pvalues) > 0.01 / 2 and float(np.max(res.cov_z)) < 3.0 and dt < 120
    detail = (f"KS p {np.round(res.ks_pvalues, 3).tolist()}, cov z max {np.max(res.cov_z):.2f}, "
              f"accept {res.accept_rate:.2f}, {dt:.1f}s")
    assert record("5 kernel stationarity", ok, detail)


def test_06_partial_update_covariance(record):
    z, dt = timed(checks.partial_update_cov_z, (-0.9, -0.5, 0.0, 0.5, 0.9), 100_000, np.random.default_rng(106))
    worst = max(z.values())
    assert record("6 partial update covariance", worst < 3.0 and dt < 30, f"max z {worst:.2f}, {dt:.1f}s")


def test_07_reverse_acceptance_certainty(record):
    (bad, certain, rejected), dt = timed(checks.reverse_acceptance_counterexamples, 10_000, np.random.default_rng(107))
    ok = bad == 0 and certain > 0 and rejected > 0 and dt < 60
    detail = f"{bad} counterexamples, {certain} certain steps, {rejected} rejections, {dt:.1f}s"
    assert record("7 reverse acceptance certainty", ok, detail)


# --- trained models ----------------------------------------------------------------

def conjugate_config(accept_mode):
    return ExperimentConfig(
        latent_dim=1, n_hmc=2, n_leapfrog=4, generative="conjugate", accept_mode=accept_mode, hidden=(),
        lr=0.01, epochs=30, batch_size=64, init_std=0.1, init_step_size=0.2, seed=8,
        dataset={"kind": "conjugate", "n": 2000, "n_valid": 500},
    )


@pytest.fixture(scope="module")
def conjugate_runs(tmp_path_factory):
    out = {}
    x_test, logp = synthetic_conjugate(1000, np.random.default_rng(99))
    for mode in ("off", "simple"):
        cfg = conjugate_config(mode)
        t = time.perf_counter()
        res = train(cfg, tmp_path_factory.mktemp(f"conj-{mode}"))
        metrics = evaluate(res.models, res.best_params, x_test, cfg, binary=True, n_nll=200)
        out[mode] = dict(cfg=cfg, res=res, metrics=metrics, logp=logp, time=time.perf_counter() - t)
    return out


def test_08_conjugate_oracle(record, conjugate_runs):
    ok_all = True
    for mode, run in conjugate_runs.items():
        m, logp = run["metrics"], run["logp"]
        bound_gap = abs(m["bound"] - logp.mean())
        nll_gap = abs(-m["nll"] - logp[:m["n_nll"]].mean())
        ok = bound_gap < 0.05 and nll_gap < 0.02 and run["time"] < 600
        ok_all &= record(f"8 conjugate oracle (acceptance {mode})", ok,
                         f"bound gap {bound_gap:.4f}, NLL gap {nll_gap:.4f}, {run['time']:.1f}s")
    assert ok_all


def consistent(m):
    # paired per-datum gap (bound - IS estimate) against three of its standard errors
    slack = 3 * m["gap_se"]
    return m["gap"] <= slack, (f"bound {m['bound_nll_subset']:.4f} vs IS {-m['nll']:.4f}, "
                               f"gap {m['gap']:.4f} <= {slack:.4f}")


def test_09_bound_below_likelihood_conjugate(record, conjugate_runs):
    ok_all = True
    for mode, run in conjugate_runs.items():
        ok, detail = consistent(run["metrics"])
        ok_all &= record(f"9 bound <= IS estimate + 3 SE (conjugate, acceptance {mode})", ok, detail)
    assert ok_all


def test_10_gradient_correctness(record):
    t = time.perf_counter()
    worst = {}
    for i, cfg in enumerate(checks.GRAD_CHECK_CONFIGS):
        errs = checks.gradient_check(cfg, np.random.default_rng(110 + i), per_param=6)
        worst.update({f"{k}[{i}]": v for k, v in errs.items()})
    dt = time.perf_counter() - t
    name, err = max(worst.items(), key=lambda kv: kv[1])
    groups = {k.split(".")[0] for k in worst}
    ok = err < 1e-4 and dt < 300 and {"encoder", "decoder", "rv", "rfinal", "racc", "mass", "hmc"} <= groups
    assert record("10 bound gradient vs finite differences", ok, f"max rel err {err:.2e} ({name}), {dt:.1f}s")


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    if not MNIST.exists():
        pytest.skip("digit subset not prepared; run demos/prepare_mnist.py")
    root = tmp_path_factory.mktemp("mnist")
    base = dict(latent_dim=2, lr=1e-3, batch_size=64, seed=0, grad_clip=100.0,
                dataset={"kind": "idx", "images": str(MNIST), "n_valid": 1000})
    t = time.perf_counter()
    train(ExperimentConfig(epochs=100, **base), root / "pre")
    arms = {
        "vi": ExperimentConfig(epochs=100, warm_start=str(root / "pre" / "last.npz"), **base),
        "hmcvi": ExperimentConfig(epochs=100, n_hmc=3, n_leapfrog=4, mass_mode="global",
                                  warm_start=str(root / "pre" / "last.npz"), **base),
    }
    out = {name: dict(cfg=cfg, res=train(cfg, root / name)) for name, cfg in arms.items()}
    out["time"] = time.perf_counter() - t
    return out


def test_11_scaled_mnist_direction(record, mnist_runs):
    vi, hmc = mnist_runs["vi"]["res"].best_valid, mnist_runs["hmcvi"]["res"].best_valid
    rates = [v for k, v in mnist_runs["hmcvi"]["res"].history[-1].items() if k.startswith("accept_")]
    ok = hmc > vi and mnist_runs["time"] < 7200 and all(0 <= r <= 1 for r in rates)
    assert record("11 scaled MNIST: HMCVI beats VI", ok,
                  f"valid bound HMCVI {hmc:.3f} vs VI {vi:.3f}, {mnist_runs['time'] / 60:.1f} min")


def test_09_bound_below_likelihood_mnist(record, mnist_runs):
    ok_all = True
    ds = load_dataset(mnist_runs["vi"]["cfg"].dataset, 0)
    for name in ("vi", "hmcvi"):
        cfg, res = mnist_runs[name]["cfg"], mnist_runs[name]["res"]
        m = evaluate(res.models, res.best_params, ds.valid, cfg, binary=False, n_nll=100)
        ok, detail = consistent(m)
        ok_all &= record(f"9 bound <= IS estimate + 3 SE (MNIST {name})", ok, detail)
        rates_ok = all(0 <= r <= 1 for r in m["accept_rates"])
        ok_all &= record(f"acceptance rates in [0, 1] (MNIST {name})", rates_ok, str(np.round(m["accept_rates"], 3).tolist()))
    assert ok_all


def test_12_entropy_shortcut_variance(record):
    t = time.perf_counter()
    cfg = ExperimentConfig(n_hmc=2, alpha_mode="learned", mass_mode="global", hidden=(16,), epochs=5, lr=3e-3,
                           dataset={"kind": "binary", "n": 512, "n_valid": 0, "dim": 16}, seed=12)
    res = train(cfg)
    x = load_dataset(cfg.dataset, cfg.seed).train[:32]
    v_mc, _ = checks.gradient_variance(res.models, res.params, x, 100, analytic_entropy=False, seed=5)
    v_an, _ = checks.gradient_variance(res.models, res.params, x, 100, analytic_entropy=True, seed=5)
    dt = time.perf_counter() - t
    # "strictly lower" is read as lower beyond floating-point noise
    ok = v_an < v_mc * (1 - 1e-9) and dt < 300
    assert record("12 analytic entropy lowers gradient variance", ok,
                  f"variance analytic {v_an:.10e} vs sampled {v_mc:.10e}, {dt:.1f}s")
