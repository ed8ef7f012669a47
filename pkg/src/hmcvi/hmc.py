"""HMC transitions with partial momentum updates and an optional Metropolis
acceptance step, chain traces, and particle ensembles.

All chain functions work on batches of independent chains, positions of
shape ``(batch, d)``. Values may be ndarrays or graph nodes; the random
draws (momentum noise and acceptance uniforms) are plain data, so a trace
can be replayed exactly with :class:`ChainNoise`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .leapfrog import DivergenceError, LeapfrogConfig, PhaseState, integrate
from .potential import Potential, kinetic_energy


@dataclass
class MassSpec:
    """Diagonal mass matrix: ``identity``, learned ``global`` or ``conditioned`` on x."""

    mode: str = "identity"
    log_diag: object = None  # global mode
    conditioner: object = None  # callable x -> log diagonal (conditioned mode)
    dim: int = 1

    def __post_init__(self):
        if self.mode not in ("identity", "global", "conditioned"):
            raise ValueError(f"unknown mass mode {self.mode!r}")
        if self.mode == "global" and self.log_diag is None:
            raise ValueError("global mass needs log_diag")
        if self.mode == "conditioned" and self.conditioner is None:
            raise ValueError("conditioned mass needs a conditioner")

    @classmethod
    def from_diag(cls, diag):
        diag = np.asarray(diag, dtype=np.float64)
        if np.any(diag <= 0):
            raise ValueError("mass entries must be positive")
        return cls("global", log_diag=np.log(diag), dim=diag.size)

    def log_diagonal(self, x=None):
        if self.mode == "identity":
            return np.zeros(self.dim)
        if self.mode == "global":
            return self.log_diag
        return self.conditioner(x)

    def diagonal(self, x=None):
        return ad.exp(self.log_diagonal(x))


@dataclass
class HmcConfig:
    n_hmc: int = 1
    leapfrog: LeapfrogConfig = field(default_factory=LeapfrogConfig)
    alpha: object = 0.0
    with_acceptance: bool = True

    def __post_init__(self):
        if self.n_hmc < 0:
            raise ValueError("n_hmc must be >= 0")
        a = ad.value(self.alpha)
        if np.any(a < -1.0) or np.any(a > 1.0):
            raise ValueError("alpha must lie in [-1, 1]")


@dataclass
class StepRecord:
    """Everything one transition produced; ``z_prop, v_prop`` is the proposal
    with its momentum already negated."""

    t: int
    z_prev: object
    v_prev: object
    v_samp: object
    u: object
    z_prop: object
    v_prop: object
    h_start: object
    h_prop: object
    p_accept: object
    accepted: np.ndarray
    divergent: np.ndarray
    z: object
    v: object


@dataclass
class ChainTrace:
    z0: object
    v0: object
    steps: list
    with_acceptance: bool
    step_size: object
    n_leapfrog: int
    alpha: object
    log_mass: object

    @property
    def T(self):
        return len(self.steps)

    @property
    def z_final(self):
        return self.steps[-1].z if self.steps else self.z0

    @property
    def v_final(self):
        return self.steps[-1].v if self.steps else self.v0

    def positions(self):
        return [ad.value(self.z0)] + [ad.value(s.z) for s in self.steps]

    def accept_rates(self):
        return [float(np.mean(s.accepted)) for s in self.steps]


@dataclass
class ChainNoise:
    """Pre-drawn randomness for a chain; ``accept`` optionally forces outcomes."""

    v0: np.ndarray
    v_samp: list
    uniforms: list
    accept: list | None = None

    @classmethod
    def draw(cls, rng, n_chains, dim, n_hmc):
        return cls(
            v0=rng.standard_normal((n_chains, dim)),
            v_samp=[rng.standard_normal((n_chains, dim)) for _ in range(n_hmc)],
            uniforms=[rng.random(n_chains) for _ in range(n_hmc)],
        )

    @classmethod
    def from_trace(cls, trace: ChainTrace, noise: "ChainNoise"):
        """Same draws, with the acceptance outcomes frozen to the trace's."""
        return cls(noise.v0, noise.v_samp, noise.uniforms,
                   [s.accepted.copy() for s in trace.steps])


def sample_momentum(log_mass, noise):
    """v = sqrt(diag M) * noise (reparameterised so gradients reach M)."""
    return ad.mul(ad.exp(ad.mul(log_mass, 0.5)), noise)


def sample_momentum_rng(m: MassSpec, x, rng, n=None):
    dim = m.dim
    eps = rng.standard_normal((dim,) if n is None else (n, dim))
    return ad.value(sample_momentum(m.log_diagonal(x), eps))


def partial_update(v_prev, v_samp, alpha):
    """u = alpha v_prev + sqrt(1 - alpha^2) v_samp."""
    if isinstance(alpha, (int, float)) and alpha == 0.0:
        return v_samp
    a = ad.value(alpha)
    if np.any(np.abs(a) > 1.0):
        raise ValueError("alpha must lie in [-1, 1]")
    return ad.add(ad.mul(alpha, v_prev), ad.mul(ad.sqrt(ad.sub(1.0, ad.mul(alpha, alpha))), v_samp))


def accept_prob_from_h(h_start, h_prop):
    """min(1, exp(-H(proposal) + H(start))); non-finite H gives 0."""
    delta = ad.sub(h_start, h_prop)
    finite = np.isfinite(ad.value(delta))
    if np.all(finite):
        return ad.exp(ad.minimum(delta, 0.0))
    safe = ad.where(finite, delta, 0.0)
    return ad.where(finite, ad.exp(ad.minimum(safe, 0.0)), 0.0)


def accept_prob(pot: Potential, s_star: PhaseState, s_tilde: PhaseState, m: MassSpec | None = None, x=None):
    inv_mass = 1.0 if m is None else ad.exp(ad.neg(m.log_diagonal(x)))
    h0 = pot.hamiltonian(s_star.z, s_star.v, inv_mass)
    h1 = pot.hamiltonian(s_tilde.z, s_tilde.v, inv_mass)
    return accept_prob_from_h(h0, h1)


def _col(mask):
    return np.asarray(mask)[..., None]


def transition(pot, z_prev, v_prev, t, step_size, n_leapfrog, alpha, log_mass,
               with_acceptance, v_noise, uniform, forced=None):
    """One HMC step with partial momentum update.

    Divergent rows count as rejected when the acceptance step is active;
    without acceptance any divergence raises ``DivergenceError``.
    """
    inv_mass = ad.exp(ad.neg(log_mass))
    v_samp = sample_momentum(log_mass, v_noise)
    u = partial_update(v_prev, v_samp, alpha)
    z_hd, v_hd, divergent = integrate(pot, z_prev, u, step_size, n_leapfrog, inv_mass)
    n = ad.value(z_prev).shape[0]
    if not with_acceptance:
        if np.any(divergent):
            raise DivergenceError(f"step {t}: {int(np.sum(divergent))} chain(s) diverged")
        accepted = np.ones(n, dtype=bool)
        return StepRecord(t, z_prev, v_prev, v_samp, u, z_hd, ad.neg(v_hd), None, None,
                          np.ones(n), accepted, divergent, z_hd, v_hd)
    h_start = pot.hamiltonian(z_prev, u, inv_mass)
    z_safe = ad.where(_col(divergent), z_prev, z_hd)
    v_safe = ad.where(_col(divergent), u, v_hd)
    h_prop = pot.hamiltonian(z_safe, v_safe, inv_mass)
    p_acc = ad.where(divergent, 0.0, accept_prob_from_h(h_start, h_prop))
    if forced is not None:
        accepted = np.asarray(forced, dtype=bool)
    else:
        accepted = (np.asarray(uniform) < ad.value(p_acc)) & ~divergent
    z_new = ad.where(_col(accepted), z_safe, z_prev)
    v_new = ad.where(_col(accepted), v_safe, ad.neg(u))
    return StepRecord(t, z_prev, v_prev, v_samp, u, z_safe, ad.neg(v_safe), h_start, h_prop,
                      p_acc, accepted, divergent, z_new, v_new)


def run_chain_batch(pot, z0, n_hmc, step_size, n_leapfrog, alpha, log_mass,
                    with_acceptance, noise: ChainNoise) -> ChainTrace:
    v0 = sample_momentum(log_mass, noise.v0)
    z, v = z0, v0
    steps = []
    for t in range(1, n_hmc + 1):
        forced = None if noise.accept is None else noise.accept[t - 1]
        rec = transition(pot, z, v, t, step_size, n_leapfrog, alpha, log_mass, with_acceptance,
                         noise.v_samp[t - 1], noise.uniforms[t - 1], forced)
        steps.append(rec)
        z, v = rec.z, rec.v
    return ChainTrace(z0, v0, steps, with_acceptance, step_size, n_leapfrog, alpha, log_mass)


def _log_mass_of(m: MassSpec | None, dim, x=None):
    return np.zeros(dim) if m is None else m.log_diagonal(x)


def hmc_step(pot: Potential, s_prev: PhaseState, cfg: HmcConfig, m: MassSpec | None, rng, x=None, t=1):
    """Single transition from ``s_prev`` (one chain or a batch)."""
    z = np.atleast_2d(ad.value(s_prev.z))
    v = np.atleast_2d(ad.value(s_prev.v))
    n, d = z.shape
    rec = transition(pot, z, v, t, cfg.leapfrog.step_size, int(cfg.leapfrog.n_steps), cfg.alpha,
                     _log_mass_of(m, d, x), cfg.with_acceptance,
                     rng.standard_normal((n, d)), rng.random(n))
    single = np.ndim(ad.value(s_prev.z)) == 1
    new = PhaseState(rec.z[0], rec.v[0]) if single else PhaseState(rec.z, rec.v)
    return new, rec


def hmc_step_basic(pot: Potential, s_prev: PhaseState, cfg: HmcConfig, m: MassSpec | None,
                   v_noise, uniform):
    """Plain HMC (no partial update, no final negation); batch of chains.

    Returns (new PhaseState, accepted mask). Kept separate so the alpha = 0
    path of :func:`transition` can be compared against it.
    """
    z = np.atleast_2d(ad.value(s_prev.z))
    d = z.shape[1]
    log_mass = _log_mass_of(m, d)
    inv_mass = np.exp(-log_mass)
    p_star = np.exp(0.5 * log_mass) * v_noise
    z_hd, p_hd, bad = integrate(pot, z, p_star, cfg.leapfrog.step_size, int(cfg.leapfrog.n_steps), inv_mass)
    p_tilde = -p_hd
    h0 = ad.value(pot.hamiltonian(z, p_star, inv_mass))
    h1 = ad.value(pot.hamiltonian(z_hd, p_tilde, inv_mass))
    with np.errstate(over="ignore", invalid="ignore"):
        p_acc = np.where(bad | ~np.isfinite(h1), 0.0, np.exp(np.minimum(h0 - h1, 0.0)))
    acc = uniform < p_acc
    z_new = np.where(acc[:, None], z_hd, z)
    v_new = np.where(acc[:, None], p_tilde, np.atleast_2d(ad.value(s_prev.v)))
    return PhaseState(z_new, v_new), acc


def run_chain(pot: Potential, q0_sample, cfg: HmcConfig, m: MassSpec | None, rng, x=None) -> ChainTrace:
    """Start at ``(q0, fresh momentum)`` and run ``cfg.n_hmc`` transitions."""
    z0 = np.atleast_2d(np.asarray(q0_sample, dtype=np.float64))
    n, d = z0.shape
    noise = ChainNoise.draw(rng, n, d, cfg.n_hmc)
    return run_chain_batch(pot, z0, cfg.n_hmc, cfg.leapfrog.step_size, int(cfg.leapfrog.n_steps),
                           cfg.alpha, _log_mass_of(m, d, x), cfg.with_acceptance, noise)


def validate_trace(trace: ChainTrace, atol=0.0) -> bool:
    """Check each step's stored state against the accept/reject case equation."""
    for rec in trace.steps:
        acc = np.asarray(rec.accepted)
        z, v = ad.value(rec.z), ad.value(rec.v)
        z_hd, v_hd = ad.value(rec.z_prop), -ad.value(rec.v_prop)
        z_prev, u = ad.value(rec.z_prev), ad.value(rec.u)
        if not trace.with_acceptance:
            if not acc.all():
                return False
        exp_z = np.where(acc[:, None], z_hd, z_prev)
        exp_v = np.where(acc[:, None], v_hd, -u)
        if not (np.allclose(z, exp_z, rtol=0, atol=atol) and np.allclose(v, exp_v, rtol=0, atol=atol)):
            return False
    return True


# --- ensembles -------------------------------------------------------------------

@dataclass
class Snapshot:
    step: int
    z: np.ndarray
    v: np.ndarray
    U: np.ndarray
    K: np.ndarray
    excluded: int = 0

    @property
    def H(self):
        return self.U + self.K

    def energy_histogram(self, bins=30):
        return np.histogram(self.U, bins=bins)


def simulate_ensemble(pot: Potential, init_sampler, n_particles: int, cfg: HmcConfig,
                      m: MassSpec | None, rng, x=None):
    """Move ``n_particles`` independent chains; one snapshot per HMC step.

    Snapshot 0 is the initial sample (momenta freshly drawn). Later snapshots
    hold the arrival momenta. Divergent particles are dropped and counted.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    z = np.asarray(init_sampler(n_particles, rng), dtype=np.float64)
    d = z.shape[1]
    log_mass = ad.value(_log_mass_of(m, d, x))
    inv_mass = np.exp(-log_mass)
    v = np.exp(0.5 * log_mass) * rng.standard_normal(z.shape)
    snaps = [Snapshot(0, z.copy(), v.copy(), ad.value(pot.energy(z)), ad.value(kinetic_energy(v, inv_mass)))]
    excluded = 0
    for t in range(1, cfg.n_hmc + 1):
        v_noise, uni = rng.standard_normal(z.shape), rng.random(len(z))
        if cfg.with_acceptance:
            rec = transition(pot, z, v, t, cfg.leapfrog.step_size, int(cfg.leapfrog.n_steps), cfg.alpha,
                             log_mass, True, v_noise, uni)
            keep = np.ones(len(z), dtype=bool)
        else:
            inv = inv_mass
            u = ad.value(partial_update(v, np.exp(0.5 * log_mass) * v_noise, cfg.alpha))
            zn, vn, bad = integrate(pot, z, u, cfg.leapfrog.step_size, int(cfg.leapfrog.n_steps), inv)
            keep = ~bad
            rec = None
        if rec is not None:
            z, v = ad.value(rec.z), ad.value(rec.v)
        else:
            z, v = zn[keep], vn[keep]
            excluded += int(np.sum(~keep))
        snaps.append(Snapshot(t, z.copy(), v.copy(), ad.value(pot.energy(z)),
                              ad.value(kinetic_energy(v, inv_mass)), excluded))
    return snaps


def hmc_trajectory(pot: Potential, z0, cfg: HmcConfig, m: MassSpec | None, rng):
    """Leapfrog-resolution record of one particle under several HMC steps.

    At every momentum resampling two rows share the position: the state
    before (resample=0) and after (resample=1) the new momentum.
    """
    z = np.asarray(z0, dtype=np.float64)
    d = z.size
    log_mass = ad.value(_log_mass_of(m, d))
    inv_mass = np.exp(-log_mass)
    v = np.exp(0.5 * log_mass) * rng.standard_normal(d)
    rows = []

    def row(z, v, flag):
        u = float(ad.value(pot.energy(z)))
        k = float(ad.value(kinetic_energy(v, inv_mass)))
        rows.append({"step": len(rows), "z": z.copy(), "v": v.copy(), "U": u, "K": k, "H": u + k,
                     "resample": flag})

    row(z, v, 0)
    eps, L = cfg.leapfrog.step_size, int(cfg.leapfrog.n_steps)
    for t in range(cfg.n_hmc):
        u_mom = ad.value(partial_update(v, np.exp(0.5 * log_mass) * rng.standard_normal(d), cfg.alpha))
        row(z, u_mom, 1)
        path = [(z, u_mom)]
        zz, vv = z, u_mom
        for _ in range(L):
            zz, vv, bad = integrate(pot, zz, vv, eps, 1, inv_mass)
            if np.any(bad):
                raise DivergenceError("trajectory diverged")
            path.append((zz, vv))
        accepted = True
        if cfg.with_acceptance:
            h0 = float(ad.value(pot.hamiltonian(z, u_mom, inv_mass)))
            h1 = float(ad.value(pot.hamiltonian(zz, vv, inv_mass)))
            accepted = rng.random() < math.exp(min(h0 - h1, 0.0))
        for zp, vp in path[1:]:
            row(zp, vp, 0)
        if accepted:
            z, v = zz, vv
        else:
            z, v = z, -u_mom
            row(z, v, 0)
    return rows


def write_ensemble_csv(path, snapshots):
    """Columns: step, particle, z1.., v1.., U, K, H."""
    d = snapshots[0].z.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "particle"] + [f"z{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
                   + ["U", "K", "H"])
        for s in snapshots:
            for i in range(len(s.z)):
                w.writerow([s.step, i, *map(repr, map(float, s.z[i])), *map(repr, map(float, s.v[i])),
                            repr(float(s.U[i])), repr(float(s.K[i])), repr(float(s.H[i]))])
