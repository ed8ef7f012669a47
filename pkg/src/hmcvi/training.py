"""Training and evaluation loops for HMCVI models."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bound import BoundOptions, assemble_bound
from .data import Dataset, binarize_stochastic, load_dataset, make_eval_draws
from .estimators import IsConfig, estimate_nll
from .models import HmcviModels, ModelSpec, load_checkpoint, save_checkpoint, warm_start

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    latent_dim: int = 2
    n_hmc: int = 0
    n_leapfrog: int = 4
    alpha_mode: str = "zero"
    alpha_value: float = 0.0
    mass_mode: str = "identity"
    accept_mode: str = "off"
    hidden: tuple = (200, 200)
    generative: str = "bernoulli"
    init_std: float = 0.01
    init_step_size: float = 0.05
    learn_step_size: bool = True
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    dataset: dict = field(default_factory=lambda: {"kind": "binary", "n": 512, "n_valid": 128})
    warm_start: str | None = None
    freeze_warm: bool = False
    analytic_entropy: bool = False
    grad_clip: float | None = None
    eval_draws: int = 5
    eval_seed: int = 1234
    valid_every: int = 0  # batches between validations; 0 means once per epoch
    abort_streak: int = 20
    is_samples: int = 5000
    is_probes: int = 5

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def model_spec(self, data_dim: int) -> ModelSpec:
        return ModelSpec(
            data_dim=data_dim, latent_dim=self.latent_dim, hidden=self.hidden,
            generative=self.generative, n_hmc=self.n_hmc, n_leapfrog=self.n_leapfrog,
            alpha_mode=self.alpha_mode, alpha_value=self.alpha_value, mass_mode=self.mass_mode,
            accept_mode=self.accept_mode, init_std=self.init_std,
            init_step_size=self.init_step_size, learn_step_size=self.learn_step_size,
        )

    def bound_options(self) -> BoundOptions:
        return BoundOptions(analytic_entropy=self.analytic_entropy)


@dataclass
class TrainResult:
    models: HmcviModels
    params: dict
    best_params: dict
    history: list
    best_valid: float
    skipped: int


def _rng(seed, *keys):
    return np.random.default_rng([seed, *keys])


def batch_loss(models, params, x, rng, options: BoundOptions):
    """Negative mean bound as a graph plus the per-datum numeric bound and trace."""
    total, terms, trace, _ = assemble_bound(models, params, x, rng=rng, options=options)
    return ad.neg(ad.mean(total)), ad.value(total), trace


def bound_gradients(models, params: dict, x, rng, options: BoundOptions):
    """Gradients of the negative mean bound; returns (loss, grads, per-datum bound, trace)."""
    aux = {}

    def fn(leaves):
        loss, vals, trace = batch_loss(models, leaves, x, rng, options)
        aux["bound"], aux["trace"] = vals, trace
        return loss

    loss, grads = ad.value_and_grad(fn, params)
    return loss, grads, aux["bound"], aux["trace"]


def bound_values(models, params, draws: np.ndarray, seed: int, options: BoundOptions | None = None,
                 batch_size: int = 500):
    """Per-datum bounds ``(k, n)`` over persisted draws ``(k, n, D)`` plus the
    per-step acceptance rates, with chain noise seeded by draw and offset."""
    options = options or BoundOptions()
    vals, acc = [], []
    for k, xk in enumerate(draws):
        row = []
        for start in range(0, xk.shape[0], batch_size):
            xb = xk[start:start + batch_size]
            total, _, trace, _ = assemble_bound(models, params, xb, rng=_rng(seed, k, start), options=options)
            row.append(ad.value(total))
            acc.append([np.asarray(s.accepted, dtype=float) for s in trace.steps])
        vals.append(np.concatenate(row))
    rates = [float(np.mean(np.concatenate([a[t] for a in acc]))) for t in range(models.spec.n_hmc)]
    return np.stack(vals), rates


def evaluate_bound(models, params, draws: np.ndarray, seed: int, options: BoundOptions | None = None,
                   batch_size: int = 500):
    """Mean bound over persisted binarised draws ``(k, n, D)``.

    Returns ``(mean bound, standard error, per-step acceptance rates)``.
    """
    vals, rates = bound_values(models, params, draws, seed, options, batch_size)
    vals = vals.ravel()
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(vals.size)), rates


def _frozen_names(params, cfg: ExperimentConfig):
    if not (cfg.warm_start and cfg.freeze_warm):
        return set()
    return {k for k in params if k.startswith(("encoder.", "decoder."))}


def init_model(cfg: ExperimentConfig, data_dim: int):
    models = HmcviModels(cfg.model_spec(data_dim))
    params = models.init_params(_rng(cfg.seed, 0))
    if cfg.warm_start:
        source, _, _ = load_checkpoint(cfg.warm_start)
        params = warm_start(params, source)
    return models, params


def _valid_draws(ds: Dataset, cfg: ExperimentConfig):
    if ds.valid.shape[0] == 0:
        return None
    if ds.binary:
        return ds.valid[None]
    return make_eval_draws(ds.valid, cfg.eval_draws, cfg.eval_seed).draws


def train(cfg: ExperimentConfig, out_dir=None, dataset: Dataset | None = None) -> TrainResult:
    """Adam ascent on the bound. Writes ``metrics.csv``, ``best.npz`` and
    ``last.npz`` into ``out_dir`` when given."""
    ds = dataset if dataset is not None else load_dataset(cfg.dataset, cfg.seed)
    models, params = init_model(cfg, ds.dim)
    store = ad.ParamStore(params)
    frozen = _frozen_names(store.params, cfg)
    options = cfg.bound_options()
    valid = _valid_draws(ds, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history, skipped, streak = [], 0, 0
    best_valid, best_params = -np.inf, store.snapshot()
    t0 = time.perf_counter()
    n_train = ds.train.shape[0]

    def validate():
        if valid is None:
            return float("nan")
        return evaluate_bound(models, store.params, valid, cfg.eval_seed, options)[0]

    for epoch in range(1, cfg.epochs + 1):
        erng = _rng(cfg.seed, 1, epoch)
        x_epoch = ds.train if ds.binary else binarize_stochastic(ds.train, erng)
        perm = erng.permutation(n_train)
        sums, count, acc_sums = 0.0, 0, np.zeros(cfg.n_hmc)
        valid_bound = float("nan")
        for b, start in enumerate(range(0, n_train, cfg.batch_size)):
            xb = x_epoch[perm[start:start + cfg.batch_size]]
            try:
                _, grads, vals, trace = bound_gradients(models, store.params, xb, _rng(cfg.seed, 2, epoch, b), options)
                if not np.all(np.isfinite(vals)):
                    raise ad.NonFiniteGradient("non-finite bound")
                if cfg.grad_clip is not None:
                    grads = ad.clip_by_global_norm(grads, cfg.grad_clip)
                store.adam_step(grads, cfg.lr, frozen)
            except (FloatingPointError, ad.NonFiniteGradient) as exc:
                skipped += 1
                streak += 1
                log.warning("epoch %d batch %d skipped: %s", epoch, b, exc)
                if streak >= cfg.abort_streak:
                    raise TrainingAborted(f"{streak} consecutive non-finite batches") from exc
                continue
            streak = 0
            sums += float(np.sum(vals))
            count += vals.size
            acc_sums += np.array([np.sum(s.accepted) for s in trace.steps], dtype=float)
            if cfg.valid_every and (b + 1) % cfg.valid_every == 0:
                valid_bound = validate()
        if not cfg.valid_every:
            valid_bound = validate()
        row = {"epoch": epoch, "train_bound": sums / max(count, 1), "valid_bound": valid_bound}
        for t in range(cfg.n_hmc):
            row[f"accept_{t + 1}"] = float(acc_sums[t] / max(count, 1))
        row["skipped"] = skipped
        row["wall_time"] = time.perf_counter() - t0
        history.append(row)
        log.info("epoch %d train %.4f valid %.4f", epoch, row["train_bound"], valid_bound)
        if np.isfinite(valid_bound) and valid_bound > best_valid:
            best_valid, best_params = valid_bound, store.snapshot()
            if out is not None:
                save_checkpoint(out / "best.npz", best_params, models.spec, {"epoch": epoch, "valid_bound": valid_bound})
        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
    if valid is None or not np.isfinite(best_valid):
        best_params = store.snapshot()
    if out is not None:
        save_checkpoint(out / "last.npz", store.params, models.spec, {"epochs": cfg.epochs})
        if not (out / "best.npz").exists():
            save_checkpoint(out / "best.npz", best_params, models.spec, {"epoch": cfg.epochs})
        with open(out / "config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
    return TrainResult(models, store.snapshot(), best_params, history, best_valid, skipped)


def write_metrics_csv(path, history):
    keys = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})


def evaluate(models: HmcviModels, params: dict, x, cfg: ExperimentConfig, binary: bool = True,
             n_nll: int | None = None) -> dict:
    """Bound averaged over evaluation draws, IS log-likelihood and acceptance rates.

    ``x`` holds binary data (``binary=True``) or intensities that are turned
    into ``cfg.eval_draws`` seeded binarisations. ``n_nll`` limits the number
    of data used for the (expensive) importance-sampling estimate.
    """
    draws = x[None] if binary else make_eval_draws(x, cfg.eval_draws, cfg.eval_seed).draws
    bound, bound_se, rates = evaluate_bound(models, params, draws, cfg.eval_seed, cfg.bound_options())
    sub = draws[0] if n_nll is None else draws[0][:n_nll]
    est = estimate_nll(models, params, sub, _rng(cfg.eval_seed, 9), IsConfig(cfg.is_samples, cfg.is_probes))
    # bound on the same data as the IS estimate; the paired gap removes the spread of log p(x) across data
    sub_vals = bound_values(models, params, sub[None], cfg.eval_seed, cfg.bound_options())[0][0]
    gap = sub_vals - est.log_px
    return {
        "bound": bound, "bound_se": bound_se,
        "nll": -est.mean, "nll_se": est.mean_stderr,
        "bound_nll_subset": float(np.mean(sub_vals)),
        "gap": float(np.mean(gap)),
        "gap_se": float(np.std(gap, ddof=1) / np.sqrt(gap.size)) if gap.size > 1 else float("inf"),
        "n_nll": int(sub.shape[0]),
        "accept_rates": rates,
        "per_datum_log_px": est.log_px.tolist(),
        "per_datum_se": est.stderr.tolist(),
    }


def evaluate_checkpoint(path, cfg: ExperimentConfig, split="valid", n_nll=None) -> dict:
    params, spec, _ = load_checkpoint(path)
    models = HmcviModels(spec)
    ds = load_dataset(cfg.dataset, cfg.seed)
    x = ds.valid if split == "valid" else ds.train
    return evaluate(models, params, x, cfg, binary=ds.binary, n_nll=n_nll)
