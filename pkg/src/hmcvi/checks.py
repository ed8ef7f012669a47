"""Invariant measurements for the integrator, the HMC kernel and the bound.

Each function returns the measured quantity; callers compare it against a
tolerance. ``run_selftest`` runs reduced-size versions of all of them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bound import BoundOptions, assemble_bound, reverse_accept_prob
from .hmc import ChainNoise, partial_update, run_chain_batch, sample_momentum
from .leapfrog import integrate, integrate_dense
from .models import HmcviModels, ModelSpec
from .potential import GaussianTarget, Potential, crater_mixture, harmonic, make_target


# --- integrator -----------------------------------------------------------------

def reversibility_error(n_draws=100, rng=None) -> float:
    """Max over random draws of ||revHD(HD(s)) - s||_inf across the built-in targets."""
    rng = rng or np.random.default_rng(0)
    targets = [make_target(n) for n in ("gauss2d", "harmonic", "free", "mixture2", "mixture3")]
    worst = 0.0
    for i in range(n_draws):
        pot = targets[i % len(targets)]
        z = rng.normal(0.0, 1.5, size=(1, pot.dim))
        v = rng.standard_normal((1, pot.dim))
        eps = rng.uniform(0.01, 0.2)
        n = int(rng.integers(1, 21))
        z1, v1, _ = integrate(pot, z, v, eps, n)
        z2, v2, _ = integrate(pot, z1, -v1, eps, n)
        worst = max(worst, np.max(np.abs(z2 - z)), np.max(np.abs(-v2 - v)))
    return float(worst)


def leapfrog_jacobian(pot: Potential, z, v, eps, n_steps=1, h=1e-6, inv_mass=1.0):
    """Central-difference Jacobian of (z, v) -> HD(z, v)."""
    s = np.concatenate([z, v])
    d = z.size
    jac = np.empty((2 * d, 2 * d))
    for k in range(2 * d):
        e = np.zeros(2 * d)
        e[k] = h
        outs = []
        for sign in (1.0, -1.0):
            s1 = s + sign * e
            z1, v1, _ = integrate(pot, s1[None, :d], s1[None, d:], eps, n_steps, inv_mass)
            outs.append(np.concatenate([z1[0], v1[0]]))
        jac[:, k] = (outs[0] - outs[1]) / (2 * h)
    return jac


def volume_errors(n_states=20, rng=None, eps=0.1) -> np.ndarray:
    """|det J - 1| for one leapfrog step on the 2-D mixture at random states."""
    rng = rng or np.random.default_rng(1)
    pot = crater_mixture()
    out = []
    for _ in range(n_states):
        z = rng.normal(0.0, 1.2, size=2)
        v = rng.standard_normal(2)
        out.append(abs(np.linalg.det(leapfrog_jacobian(pot, z, v, eps)) - 1.0))
    return np.asarray(out)


def energy_error_ratios(eps0=0.2, span=10.0, halvings=3):
    """max|dH| ratios between successive step-size halvings on U = q^2/2."""
    pot = harmonic(1)
    errs = []
    for k in range(halvings + 1):
        eps = eps0 / 2 ** k
        n = int(round(span / eps))
        z, v = np.array([[1.0]]), np.array([[0.0]])
        h0 = 0.5
        worst = 0.0
        for _ in range(n):
            z, v, _ = integrate(pot, z, v, eps, 1)
            worst = max(worst, abs(float(0.5 * z[0, 0] ** 2 + 0.5 * v[0, 0] ** 2) - h0))
        errs.append(worst)
    return [errs[k] / errs[k + 1] for k in range(halvings)], errs


class _LinearlyTransformed(Potential):
    """U'(q') = U(A q'); force pulled back with A^T."""

    def __init__(self, base: Potential, a):
        self.base, self.a, self.dim = base, np.asarray(a), base.dim

    def energy(self, z):
        return self.base.energy(ad.value(z) @ self.a.T)

    def grad(self, z):
        return ad.value(self.base.grad(ad.value(z) @ self.a.T)) @ self.a


def rescaling_errors(n_mats=20, rng=None, eps=0.05, n_steps=20, max_cond=50.0) -> np.ndarray:
    """Max position discrepancy between identity-mass leapfrog in q' = A^-1 q
    (mapped back) and dense-mass leapfrog with M^-1 = A A^T."""
    rng = rng or np.random.default_rng(2)
    base = crater_mixture()
    out = []
    while len(out) < n_mats:
        a = rng.standard_normal((2, 2))
        if np.linalg.cond(a) > max_cond:
            continue
        q = rng.normal(0.0, 1.0, size=2)
        p = rng.standard_normal(2)
        pos, _ = integrate_dense(lambda x: ad.value(base.grad(x[None]))[0], q, p, eps, n_steps, a @ a.T)
        tp = _LinearlyTransformed(base, a)
        qp, pp = np.linalg.solve(a, q)[None], (a.T @ p)[None]
        worst = 0.0
        for n in range(1, n_steps + 1):
            qp, pp, _ = integrate(tp, qp, pp, eps, 1)
            worst = max(worst, float(np.max(np.abs(a @ qp[0] - pos[n]))))
        out.append(worst)
    return np.asarray(out)


# --- kernel ---------------------------------------------------------------------

@dataclass
class StationarityResult:
    ks_pvalues: list
    cov_z: np.ndarray  # |empirical - exact| / standard error per covariance entry
    mean_z: np.ndarray
    accept_rate: float


def stationarity(n_chains=10_000, n_hmc=5, rng=None, eps=0.45, n_leapfrog=5, alpha=0.0) -> StationarityResult:
    """Run the full kernel (with acceptance) from exact samples of a 2-D Gaussian."""
    from scipy import stats

    rng = rng or np.random.default_rng(3)
    mean, var = np.array([0.5, -1.0]), np.array([1.0, 0.25])
    pot = GaussianTarget(mean, var)
    z0 = pot.sample(n_chains, rng)
    noise = ChainNoise.draw(rng, n_chains, 2, n_hmc)
    trace = run_chain_batch(pot, z0, n_hmc, eps, n_leapfrog, alpha, np.zeros(2), True, noise)
    z = trace.z_final
    exact = pot.sample(n_chains, rng)
    pvals = [float(stats.ks_2samp(z[:, i], exact[:, i]).pvalue) for i in range(2)]
    cov = np.cov(z, rowvar=False)
    true_cov = np.diag(var)
    se = np.sqrt((np.outer(var, var) + true_cov ** 2) / n_chains)
    mean_z = np.abs(z.mean(axis=0) - mean) / np.sqrt(var / n_chains)
    rate = float(np.mean([np.mean(s.accepted) for s in trace.steps]))
    return StationarityResult(pvals, np.abs(cov - true_cov) / se, mean_z, rate)


def partial_update_cov_z(alphas=(-0.9, -0.5, 0.0, 0.5, 0.9), n=100_000, rng=None,
                         mass=(0.5, 2.0)) -> dict:
    """Max |Cov(u) - M| in standard errors for each alpha."""
    rng = rng or np.random.default_rng(4)
    log_mass = np.log(np.asarray(mass))
    m = np.diag(np.exp(log_mass))
    se = np.sqrt((np.outer(np.diag(m), np.diag(m)) + m ** 2) / n)
    out = {}
    for a in alphas:
        v_prev = sample_momentum(log_mass, rng.standard_normal((n, len(mass))))
        v_samp = sample_momentum(log_mass, rng.standard_normal((n, len(mass))))
        u = partial_update(v_prev, v_samp, a)
        out[a] = float(np.max(np.abs(np.cov(u, rowvar=False) - m) / se))
    return out


def reverse_acceptance_counterexamples(n_steps=10_000, rng=None, eps=0.6, n_leapfrog=6):
    """Count steps where H(revHD(s_t)) <= H(s_t) but the step was rejected.

    Returns ``(counterexamples, n_certain, n_rejected)``.
    """
    rng = rng or np.random.default_rng(5)
    pot = crater_mixture()
    n_chains = 500
    z = rng.normal(0.0, 1.2, size=(n_chains, 2))
    bad = certain_total = rejected = 0
    log_mass = np.zeros(2)
    for _ in range(n_steps // n_chains):
        noise = ChainNoise.draw(rng, n_chains, 2, 1)
        trace = run_chain_batch(pot, z, 1, eps, n_leapfrog, 0.3, log_mass, True, noise)
        rec = trace.steps[0]
        _, h_rev, h_now = reverse_accept_prob(rec.z, rec.v, pot, eps, n_leapfrog, log_mass)
        certain = ad.value(h_rev) <= ad.value(h_now)
        bad += int(np.sum(certain & ~rec.accepted))
        certain_total += int(np.sum(certain))
        rejected += int(np.sum(~rec.accepted))
        z = rec.z
    return bad, certain_total, rejected


# --- bound gradients ------------------------------------------------------------------

GRAD_CHECK_CONFIGS = (
    dict(n_hmc=2, alpha_mode="learned", mass_mode="global", accept_mode="nn"),
    dict(n_hmc=2, alpha_mode="learned", mass_mode="nn", accept_mode="simple"),
    dict(n_hmc=2, alpha_mode="zero", mass_mode="nn", accept_mode="off"),
)


def gradient_check(config: dict, rng=None, n=4, data_dim=6, h=1e-6, per_param=4, analytic_entropy=False):
    """Relative error of tape gradients vs central differences on a frozen trace.

    Returns ``{parameter name: max relative error}`` checking up to
    ``per_param`` entries of every parameter array.
    """
    rng = rng or np.random.default_rng(6)
    spec = ModelSpec(data_dim=data_dim, latent_dim=2, hidden=(5, 4), n_leapfrog=3, init_std=0.3,
                     init_step_size=0.25, mass_hidden=4, **config)
    models = HmcviModels(spec)
    params = models.init_params(rng)
    x = (rng.random((n, data_dim)) < 0.5).astype(float)
    opts = BoundOptions(analytic_entropy=analytic_entropy)
    _, _, trace, noise = assemble_bound(models, params, x, rng=rng, options=opts)
    frozen = noise.frozen(trace)
    names = sorted(params)

    def total(pdict):
        return ad.sum(assemble_bound(models, pdict, x, noise=frozen, options=opts)[0])

    grads = ad.grad(lambda *vals: total(dict(zip(names, vals))), *[params[k] for k in names])
    errors = {}
    for name, g in zip(names, grads):
        arr = params[name]
        flat_idx = rng.choice(arr.size, size=min(per_param, arr.size), replace=False) if arr.size else []
        worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape) if arr.ndim else ()
            vals = []
            for sign in (1.0, -1.0):
                pert = dict(params)
                a = arr.copy()
                a[idx] += sign * h
                pert[name] = a
                vals.append(float(ad.value(total(pert))))
            fd = (vals[0] - vals[1]) / (2 * h)
            an = float(np.asarray(g)[idx])
            worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-6))
        errors[name] = worst
    return errors


def gradient_variance(models: HmcviModels, params, x, n_repeats=100, analytic_entropy=False, seed=0):
    """Sum over all parameter entries of the empirical variance of the bound
    gradient across ``n_repeats`` independent noise draws on a fixed batch."""
    opts = BoundOptions(analytic_entropy=analytic_entropy)
    names = sorted(params)
    samples = []
    for r in range(n_repeats):
        rng = np.random.default_rng([seed, r])
        g = ad.grad(lambda *vals: ad.mean(assemble_bound(models, dict(zip(names, vals)), x, rng=rng,
                                                         options=opts)[0]),
                    *[params[k] for k in names])
        samples.append(np.concatenate([np.ravel(a) for a in g]))
    samples = np.asarray(samples)
    return float(np.sum(np.var(samples, axis=0, ddof=1))), samples


# --- self test ------------------------------------------------------------------------

def run_selftest(verbose=True) -> bool:
    """Quick versions of the invariant suites. Returns True when all pass."""
    results = []
    results.append(("leapfrog reversibility", reversibility_error(30) < 1e-9))
    results.append(("volume preservation", float(np.max(volume_errors(5))) < 1e-6))
    ratios, _ = energy_error_ratios()
    results.append(("energy error order 2", all(3.5 <= r <= 4.5 for r in ratios)))
    results.append(("mass rescaling", float(np.max(rescaling_errors(5))) < 1e-10))
    st = stationarity(2000, 3)
    results.append(("kernel stationarity", min(st.ks_pvalues) > 0.01 / 2 and np.max(st.cov_z) < 3.0))
    cz = partial_update_cov_z(n=20_000)
    results.append(("partial update covariance", max(cz.values()) < 3.0))
    bad, _, _ = reverse_acceptance_counterexamples(2000)
    results.append(("reverse acceptance certainty", bad == 0))
    errs = gradient_check(GRAD_CHECK_CONFIGS[0], per_param=2)
    results.append(("bound gradient", max(errs.values()) < 1e-4))
    ok = True
    for name, passed in results:
        ok &= bool(passed)
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
