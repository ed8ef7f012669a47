"""Importance-sampling estimates of the marginal log-likelihood log p(x)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bound import make_potential
from .hmc import ChainNoise, run_chain_batch
from .models import HmcviModels, gaussian_log_prob


class EstimateFailure(FloatingPointError):
    pass


@dataclass
class IsConfig:
    n_samples: int = 5000
    n_probes: int = 5

    def __post_init__(self):
        if self.n_samples < 1 or self.n_probes < 1:
            raise ValueError("n_samples and n_probes must be >= 1")


@dataclass
class IsEstimate:
    log_px: np.ndarray  # per datum
    stderr: np.ndarray
    n_samples: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.log_px))

    @property
    def mean_stderr(self) -> float:
        return float(np.sqrt(np.sum(self.stderr ** 2)) / self.log_px.size)


def log_mean_exp(log_w):
    """Returns (log mean exp(log_w), delta-method standard error of that value)."""
    log_w = np.asarray(log_w, dtype=np.float64)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise EstimateFailure(f"no finite importance weight (max log weight {top})")
    w = np.exp(log_w - top)
    m = w.mean()
    est = top + math.log(m)
    se = float(np.std(w, ddof=1) / (math.sqrt(w.size) * m)) if w.size > 1 else float("inf")
    return est, se


def posterior_centres(models: HmcviModels, params, x, rng, n_probes=5):
    """Mean of ``n_probes`` HMC-enhanced posterior samples per datum."""
    spec = models.spec
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape[0], spec.latent_dim
    pot = make_potential(models, params, x)
    q0 = models.encode(params, x)
    log_mass = ad.value(models.mass_log_diag(params, x))
    eps = ad.value(models.step_size(params))
    alpha = ad.value(models.alpha(params))
    with_acc = spec.accept_mode != "off"
    total = np.zeros((n, d))
    for _ in range(n_probes):
        z0 = ad.value(q0.sample(rng.standard_normal((n, d))))
        noise = ChainNoise.draw(rng, n, d, spec.n_hmc)
        trace = run_chain_batch(pot, z0, spec.n_hmc, eps, spec.n_leapfrog, float(alpha),
                                log_mass, with_acc, noise)
        total += ad.value(trace.z_final)
    return total / n_probes, ad.value(q0.log_var)


def estimate_nll(models: HmcviModels, params, x, rng, cfg: IsConfig | None = None) -> IsEstimate:
    """Importance-sampling estimate of log p(x) for each row of ``x``.

    The proposal is a diagonal Gaussian centred on the averaged HMC-enhanced
    posterior samples with the variances of q0(z|x).
    """
    cfg = cfg or IsConfig()
    x = np.asarray(x, dtype=np.float64)
    centres, log_var = posterior_centres(models, params, x, rng, cfg.n_probes)
    out, se = np.empty(x.shape[0]), np.empty(x.shape[0])
    d = models.spec.latent_dim
    for i in range(x.shape[0]):
        z = centres[i] + np.exp(0.5 * log_var[i]) * rng.standard_normal((cfg.n_samples, d))
        xi = np.broadcast_to(x[i], (cfg.n_samples, x.shape[1]))
        pot = make_potential(models, params, xi)
        log_w = ad.value(pot.log_joint(z)) - ad.value(gaussian_log_prob(z, centres[i], log_var[i]))
        try:
            out[i], se[i] = log_mean_exp(log_w)
        except EstimateFailure as exc:
            raise EstimateFailure(f"datum {i}: {exc}") from None
    return IsEstimate(out, se, cfg.n_samples)


def write_nll_csv(path, est: IsEstimate, ids=None):
    ids = range(est.log_px.size) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["datum", "nll", "stderr", "n_samples"])
        for i, lp, s in zip(ids, est.log_px, est.stderr):
            w.writerow([i, repr(float(-lp)), repr(float(s)), est.n_samples])
