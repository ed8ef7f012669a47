"""Leapfrog integration of Hamilton's equations with a diagonal mass matrix.

Kinetic energy is K(v) = v^T M^-1 v / 2, so the position update uses
``M^-1 v``. Several steps share gradient evaluations: the closing half kick
of one step and the opening half kick of the next are applied as two
successive subtractions of the same cached ``(eps / 2) * grad``. This keeps
``L`` fused steps bit-identical to ``L`` calls with one step each.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .potential import Potential, kinetic_energy

DIVERGENCE_LIMIT = 1e8


class DivergenceError(FloatingPointError):
    """A trajectory left the finite region (non-finite or |coordinate| > 1e8)."""


@dataclass
class PhaseState:
    z: object
    v: object

    def __post_init__(self):
        if np.shape(ad.value(self.z)) != np.shape(ad.value(self.v)):
            raise ValueError("position and momentum must have the same shape")

    def negate(self) -> "PhaseState":
        return PhaseState(self.z, ad.neg(self.v))

    def as_array(self):
        return np.concatenate([np.atleast_1d(ad.value(self.z)), np.atleast_1d(ad.value(self.v))], axis=-1)


@dataclass
class LeapfrogConfig:
    step_size: object = 0.1
    n_steps: int = 1
    mass: object = None  # diagonal entries; None means identity

    def __post_init__(self):
        if np.any(ad.value(self.step_size) <= 0):
            raise ValueError("step size must be positive")
        if int(self.n_steps) < 1:
            raise ValueError("need at least one leapfrog step")
        if self.mass is not None and np.any(ad.value(self.mass) <= 0):
            raise ValueError("mass entries must be positive")

    @property
    def inv_mass(self):
        return 1.0 if self.mass is None else ad.div(1.0, self.mass)


def _diverged(*arrays):
    bad = None
    for a in arrays:
        a = ad.value(a)
        row = ~np.all(np.isfinite(a) & (np.abs(a) <= DIVERGENCE_LIMIT), axis=-1)
        bad = row if bad is None else bad | row
    return bad


def integrate(pot: Potential, z, v, step_size, n_steps: int, inv_mass=1.0):
    """Run ``n_steps`` fused leapfrog steps.

    Returns ``(z, v, diverged)`` where ``diverged`` flags rows (or the single
    state) whose trajectory became non-finite or exceeded the limit.
    """
    half = ad.mul(step_size, 0.5)
    drift = ad.mul(step_size, inv_mass)
    kick = ad.mul(half, pot.grad(z))
    v = ad.sub(v, kick)
    diverged = _diverged(z, v)
    for n in range(n_steps):
        z = ad.add(z, ad.mul(drift, v))
        kick = ad.mul(half, pot.grad(z))
        v = ad.sub(v, kick)
        if n < n_steps - 1:
            v = ad.sub(v, kick)
        diverged = diverged | _diverged(z, v)
    return z, v, diverged


def leapfrog_hd(pot: Potential, s: PhaseState, cfg: LeapfrogConfig) -> PhaseState:
    """Simulate the dynamics forward for ``cfg.n_steps`` steps."""
    z, v, bad = integrate(pot, s.z, s.v, cfg.step_size, int(cfg.n_steps), cfg.inv_mass)
    if np.any(bad):
        raise DivergenceError(f"leapfrog diverged in {int(np.sum(bad))} trajectory(ies)")
    return PhaseState(z, v)


def leapfrog_rev_hd(pot: Potential, s: PhaseState, cfg: LeapfrogConfig) -> PhaseState:
    """Run the dynamics backwards in time: negate, integrate, negate."""
    return leapfrog_hd(pot, s.negate(), cfg).negate()


def alt_leapfrog_step(pot: Potential, s: PhaseState, cfg: LeapfrogConfig) -> PhaseState:
    """One step in constant-acceleration form (slower; used as a cross-check).

    z1 = z + eps M^-1 v + eps^2/2 M^-1 F(z);  v1 = v + eps (F(z) + F(z1)) / 2
    """
    eps, im = cfg.step_size, cfg.inv_mass
    f0 = ad.neg(pot.grad(s.z))
    z1 = ad.add(ad.add(s.z, ad.mul(ad.mul(eps, im), s.v)),
                ad.mul(ad.mul(ad.mul(ad.mul(eps, eps), 0.5), im), f0))
    f1 = ad.neg(pot.grad(z1))
    v1 = ad.add(s.v, ad.mul(eps, ad.mul(ad.add(f0, f1), 0.5)))
    if np.any(_diverged(z1, v1)):
        raise DivergenceError("leapfrog diverged")
    return PhaseState(z1, v1)


def integrate_dense(grad_fn, q, p, step_size, n_steps, inv_mass_matrix):
    """Leapfrog with a dense inverse mass matrix (numeric only).

    ``K(p) = p^T M^-1 p / 2``; used to check the coordinate-rescaling
    equivalence. Returns the list of positions including the start.
    """
    q = np.array(q, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    minv = np.asarray(inv_mass_matrix, dtype=np.float64)
    half = 0.5 * step_size
    positions = [q.copy()]
    kick = half * grad_fn(q)
    p = p - kick
    for n in range(n_steps):
        q = q + step_size * (minv @ p)
        positions.append(q.copy())
        kick = half * grad_fn(q)
        p = p - kick
        if n < n_steps - 1:
            p = p - kick
    return positions, p


def trajectory(pot: Potential, s: PhaseState, cfg: LeapfrogConfig):
    """Record every leapfrog point: dicts with step, z, v, U, K, H."""
    rows = []
    z, v = np.asarray(ad.value(s.z), float), np.asarray(ad.value(s.v), float)
    im = ad.value(cfg.inv_mass)
    for n in range(int(cfg.n_steps) + 1):
        if n > 0:
            z, v, bad = integrate(pot, z, v, ad.value(cfg.step_size), 1, im)
            if np.any(bad):
                raise DivergenceError(f"trajectory diverged at step {n}")
        u = float(ad.value(pot.energy(z)))
        k = float(ad.value(kinetic_energy(v, im)))
        rows.append({"step": n, "z": z.copy(), "v": v.copy(), "U": u, "K": k, "H": u + k})
    return rows


def write_trajectory_csv(path, rows):
    """Columns: step, z_1..z_d, v_1..v_d, U, K, H (plus resample if present)."""
    d = len(rows[0]["z"])
    extra = [k for k in ("resample",) if k in rows[0]]
    header = (["step"] + [f"z{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
              + ["U", "K", "H"] + extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r["step"], *map(repr, map(float, r["z"])), *map(repr, map(float, r["v"])),
                        repr(r["U"]), repr(r["K"]), repr(r["H"])] + [int(r[k]) for k in extra])
