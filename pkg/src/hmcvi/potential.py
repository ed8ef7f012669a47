"""Potential energies U(z) = -log f_target(z) and their forces.

Positions are arrays of shape ``(..., d)``; energies reduce the last axis.
``Potential.grad`` returns a closed-form gradient expression built from graph
ops, so gradients can later be propagated *through* a leapfrog trajectory with
a first-order engine. :func:`grad_energy` instead differentiates ``energy``
with the tape and serves as the cross-check.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .models import LOG_2PI, Mlp

RATE_EPS = 1e-7
_LOGIT_LIMIT = math.log((1.0 - RATE_EPS) / RATE_EPS)


class NonFiniteEnergy(FloatingPointError):
    pass


class Potential:
    dim: int = 1

    def energy(self, z):
        raise NotImplementedError

    def grad(self, z):
        # generic fallback: tape gradient, numeric only
        if ad.is_var(z):
            raise NotImplementedError(f"{type(self).__name__} has no differentiable force")
        return grad_energy(self, z)

    def hamiltonian(self, z, v, inv_mass=1.0):
        return ad.add(self.energy(z), kinetic_energy(v, inv_mass))


def kinetic_energy(v, inv_mass=1.0):
    """K(v) = v^T M^-1 v / 2 for a diagonal mass given by its inverse."""
    return ad.mul(ad.sum(ad.mul(ad.mul(v, v), inv_mass), axis=-1), 0.5)


def energy(p: Potential, q):
    """Evaluate U(q); non-finite values raise :class:`NonFiniteEnergy`."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != p.dim:
        raise ValueError(f"position has dim {q.shape[-1]}, potential expects {p.dim}")
    u = ad.value(p.energy(q))
    if not np.all(np.isfinite(u)):
        raise NonFiniteEnergy("energy is not finite")
    return u


def grad_energy(p: Potential, q):
    """Gradient of U at ``q`` by reverse-mode differentiation of ``p.energy``."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != p.dim:
        raise ValueError(f"position has dim {q.shape[-1]}, potential expects {p.dim}")
    (g,) = ad.grad(lambda z: ad.sum(p.energy(z)), q)
    if not np.all(np.isfinite(g)):
        raise NonFiniteEnergy("gradient is not finite")
    return g


class ZeroPotential(Potential):
    def __init__(self, dim=1):
        self.dim = dim

    def energy(self, z):
        return ad.mul(ad.sum(z, axis=-1), 0.0)

    def grad(self, z):
        return ad.mul(z, 0.0)


class GaussianTarget(Potential):
    """Diagonal Gaussian with constants dropped: U = sum (z - mu)^2 / (2 var)."""

    def __init__(self, mean, var):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.var = np.broadcast_to(np.asarray(var, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.var <= 0):
            raise ValueError("variances must be positive")
        self.dim = self.mean.size

    def energy(self, z):
        diff = ad.sub(z, self.mean)
        return ad.mul(ad.sum(ad.div(ad.mul(diff, diff), self.var), axis=-1), 0.5)

    def grad(self, z):
        return ad.div(ad.sub(z, self.mean), self.var)

    def sample(self, n, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))


def harmonic(dim=1):
    """U(q) = |q|^2 / 2."""
    return GaussianTarget(np.zeros(dim), 1.0)


class GaussianMixtureTarget(Potential):
    """Normalised mixture of diagonal Gaussians; U = -log density (constants kept)."""

    def __init__(self, means, variances, weights):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.variances = np.broadcast_to(np.asarray(variances, dtype=np.float64),
                                         self.means.shape).copy()
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (self.means.shape[0],):
            raise ValueError("one weight per component required")
        if not math.isclose(self.weights.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("weights must sum to 1")
        if np.any(self.weights <= 0) or np.any(self.variances <= 0):
            raise ValueError("weights and variances must be positive")
        self.dim = self.means.shape[1]
        self._log_norm = (np.log(self.weights)
                          - 0.5 * np.sum(np.log(2 * np.pi * self.variances), axis=1))

    def _component_logs(self, z):
        logs = []
        for k in range(len(self.weights)):
            diff = ad.sub(z, self.means[k])
            quad = ad.sum(ad.div(ad.mul(diff, diff), self.variances[k]), axis=-1)
            logs.append(ad.add(ad.mul(quad, -0.5), self._log_norm[k]))
        shift = np.max(np.stack([ad.value(a) for a in logs]), axis=0)
        return logs, shift

    def energy(self, z):
        logs, shift = self._component_logs(z)
        total = ad.exp(ad.sub(logs[0], shift))
        for a in logs[1:]:
            total = ad.add(total, ad.exp(ad.sub(a, shift)))
        return ad.neg(ad.add(ad.log(total), shift))

    def grad(self, z):
        logs, shift = self._component_logs(z)
        ws = [ad.exp(ad.sub(a, shift)) for a in logs]
        total = ws[0]
        for w in ws[1:]:
            total = ad.add(total, w)
        g = None
        for k, w in enumerate(ws):
            resp = ad.div(w, total)
            resp = ad.expand_last(resp)
            term = ad.mul(resp, ad.div(ad.sub(z, self.means[k]), self.variances[k]))
            g = term if g is None else ad.add(g, term)
        return g

    def sample(self, n, rng):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal((n, self.dim))


def crater_mixture():
    """Three-basin 2-D landscape used for trajectory and ensemble pictures."""
    return GaussianMixtureTarget(
        means=[[-1.5, -1.0], [1.5, -0.5], [0.0, 1.6]],
        variances=[[0.30, 0.20], [0.25, 0.35], [0.40, 0.15]],
        weights=[0.35, 0.35, 0.30],
    )


class VaeJointPotential(Potential):
    """U(z) = -log pi(z) - log p(x | z) for a Bernoulli decoder, constants kept.

    ``x`` is one binary image ``(n_pixels,)`` or a batch ``(batch, n_pixels)``
    paired row-wise with positions. Rates are clamped to ``[1e-7, 1 - 1e-7]``
    by clipping the logits; ``clamp_count`` accumulates how many entries hit
    the clamp.
    """

    def __init__(self, x, decoder: Mlp, params: dict):
        self.x = np.asarray(x, dtype=np.float64)
        self.decoder = decoder
        self.params = params
        self.dim = decoder.spec.input_dim
        self.clamp_count = 0

    def _logits(self, z):
        out, layers = self.decoder(self.params, z, keep=True)
        raw = ad.value(out)
        self.clamp_count += int(np.count_nonzero(np.abs(raw) > _LOGIT_LIMIT))
        return ad.clip(out, -_LOGIT_LIMIT, _LOGIT_LIMIT), layers

    def log_likelihood(self, z):
        logits, _ = self._logits(z)
        # x log r + (1 - x) log (1 - r) with r = sigmoid(logit)
        ll = ad.add(ad.mul(self.x, ad.neg(ad.softplus(ad.neg(logits)))),
                    ad.mul(1.0 - self.x, ad.neg(ad.softplus(logits))))
        return ad.sum(ll, axis=-1)

    def log_prior(self, z):
        return log_std_normal(z)

    def log_joint(self, z):
        return ad.add(self.log_prior(z), self.log_likelihood(z))

    def energy(self, z):
        return ad.neg(self.log_joint(z))

    def grad(self, z):
        logits, layers = self._logits(z)
        inside = (np.abs(ad.value(layers[-1][0])) <= _LOGIT_LIMIT).astype(float)
        g_logits = ad.mul(ad.sub(self.x, ad.sigmoid(logits)), inside)
        g_ll = self.decoder.input_grad(self.params, layers, g_logits)
        return ad.sub(z, g_ll)


class ConjugateGaussianPotential(Potential):
    """Prior N(0, I), likelihood N(x; z, I); U = -log p(x, z) with constants."""

    def __init__(self, x):
        self.x = np.asarray(x, dtype=np.float64)
        self.dim = self.x.shape[-1]

    def log_joint(self, z):
        diff = ad.sub(self.x, z)
        lik = ad.mul(ad.add(ad.sum(ad.mul(diff, diff), axis=-1), self.dim * LOG_2PI), -0.5)
        return ad.add(log_std_normal(z), lik)

    def energy(self, z):
        return ad.neg(self.log_joint(z))

    def grad(self, z):
        return ad.sub(ad.mul(z, 2.0), self.x)


def log_std_normal(z):
    d = ad.value(z).shape[-1]
    return ad.mul(ad.add(ad.sum(ad.mul(z, z), axis=-1), d * LOG_2PI), -0.5)


def vae_joint_logp(pot: VaeJointPotential, z):
    """log pi(z) + sum_i [x_i log rate_i + (1 - x_i) log(1 - rate_i)]."""
    return ad.value(pot.log_joint(np.asarray(z, dtype=np.float64)))


_REGISTRY = {
    "gauss2d": lambda **kw: GaussianTarget(np.zeros(2), 1.0),
    "harmonic": lambda dim=1, **kw: harmonic(dim),
    "free": lambda dim=2, **kw: ZeroPotential(dim),
    "mixture2": lambda **kw: GaussianMixtureTarget([[-1.0], [1.0]], [[1.0], [1.0]], [0.5, 0.5]),
    "mixture3": lambda **kw: crater_mixture(),
    "vae": lambda x=None, decoder=None, params=None, **kw: VaeJointPotential(x, decoder, params),
}


def make_target(name: str, **kwargs) -> Potential:
    """Look up a target by its config name (``gauss2d``, ``mixture3``, ``vae``, ...)."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; known: {sorted(_REGISTRY)}") from None
    if name == "vae" and kwargs.get("decoder") is None:
        raise ValueError("the vae target needs x, decoder and params")
    return factory(**kwargs)


def target_names():
    return sorted(_REGISTRY)
