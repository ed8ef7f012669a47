"""Auxiliary lower bound for HMC-enhanced variational inference.

Per datum the bound is

    log p(x, z_T) - log q0(z_0|x) - log f_kin(v_0|x) + log r_final(v_T|z_T, x)
      + sum_t [ log r(s_{t-1}|s_t, t, x) - log q(s_t|s_{t-1}, x) ]

with forward transition densities

    log q = log q_U(u_{t-1}|v_{t-1}, x) [+ log p_acc  or  log(1 - p_acc)]

and reverse densities

    log r = log r_V(v_{t-1}|z_{t-1}, u_{t-1}, t, x) [+ log P(A=1|s_t)  or  log P(A=0|s_t)].

The Dirac terms of the position coordinates cancel between forward and
reverse densities and are never evaluated; :func:`delta_cancellation_check`
verifies the position identities they encode instead.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hmc import ChainNoise, ChainTrace, run_chain_batch
from .leapfrog import integrate
from .models import HmcviModels, gaussian_entropy, gaussian_log_prob
from .potential import ConjugateGaussianPotential, VaeJointPotential, kinetic_energy

P_CLAMP = 1e-12


class BoundError(FloatingPointError):
    pass


@dataclass
class BoundOptions:
    cancel_v0: bool = True  # alpha = 0 only: drop the v_0 terms that cancel
    analytic_entropy: bool = False
    v0_reverse: str = "model"  # "model" | "fkin": reverse density for v_0 when not cancelled


@dataclass
class BoundTerms:
    """Per-datum contributions; ``forward``/``reverse`` hold one entry per step."""

    log_p_joint: object
    log_q0: object
    log_fkin_v0: object
    log_r_final: object
    forward: list = field(default_factory=list)
    reverse: list = field(default_factory=list)

    def total(self):
        out = ad.sub(self.log_p_joint, self.log_q0)
        out = ad.sub(out, self.log_fkin_v0)
        out = ad.add(out, self.log_r_final)
        for f, r in zip(self.forward, self.reverse):
            out = ad.add(out, ad.sub(r, f))
        return out

    def check_finite(self):
        named = {"log_p_joint": self.log_p_joint, "log_q0": self.log_q0,
                 "log_fkin_v0": self.log_fkin_v0, "log_r_final": self.log_r_final}
        named.update({f"forward[{i + 1}]": f for i, f in enumerate(self.forward)})
        named.update({f"reverse[{i + 1}]": r for i, r in enumerate(self.reverse)})
        for name, val in named.items():
            if not np.all(np.isfinite(ad.value(val))):
                raise BoundError(f"non-finite bound term: {name}")

    def summary(self) -> dict:
        def m(v):
            return float(np.mean(ad.value(v)))
        return {
            "bound": m(self.total()),
            "log_p_joint": m(self.log_p_joint),
            "log_q0": m(self.log_q0),
            "log_fkin_v0": m(self.log_fkin_v0),
            "log_r_final": m(self.log_r_final),
            "forward": [m(f) for f in self.forward],
            "reverse": [m(r) for r in self.reverse],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())


# --- densities ------------------------------------------------------------------

def log_fkin(v, log_mass):
    """log N(v; 0, diag M)."""
    return gaussian_log_prob(v, 0.0, log_mass)


def entropy_terms(q0_log_var=None, log_mass=None, alpha=0.0, n_hmc=0, dim=None):
    """Closed-form expected NLL of the initial sample and of every momentum draw.

    Returns the sum H(q0) + n_hmc * H(f_kin) (+ H(f_kin) for v_0 when
    ``alpha`` is non-zero), i.e. the replacement for the sampled
    -log q0(z0|x) and -log f_kin(.|x) terms.
    """
    total = 0.0
    if q0_log_var is not None:
        total = ad.add(total, gaussian_entropy(q0_log_var))
    if log_mass is not None:
        d = dim if dim is not None else np.shape(ad.value(log_mass))[-1]
        n_draws = n_hmc + (1 if ad.value(alpha) != 0 else 0)
        if n_draws:
            total = ad.add(total, ad.mul(gaussian_entropy(log_mass, d), float(n_draws)))
    return total


def log_q_u(u, v_prev, alpha, log_mass, analytic_entropy=False):
    """log q_U(u | v_prev) = log f_kin(v_samp) - (d/2) log(1 - alpha^2)."""
    a = ad.value(alpha)
    if np.any(np.abs(a) >= 1.0):
        raise ValueError("|alpha| = 1 makes the momentum update deterministic; no density")
    d = ad.value(u).shape[-1]
    if isinstance(alpha, (int, float)) and alpha == 0.0:
        return ad.neg(gaussian_entropy(log_mass, d)) if analytic_entropy else log_fkin(u, log_mass)
    one_m = ad.sub(1.0, ad.mul(alpha, alpha))
    if analytic_entropy:
        base = ad.neg(gaussian_entropy(log_mass, d))
    else:
        v_samp = ad.div(ad.sub(u, ad.mul(alpha, v_prev)), ad.sqrt(one_m))
        base = log_fkin(v_samp, log_mass)
    return ad.sub(base, ad.mul(ad.log(one_m), 0.5 * d))


def _log_clamped(p):
    return ad.log(ad.clip(p, P_CLAMP, 1.0 - P_CLAMP))


def _log_branch(p, accepted):
    """log p where accepted else log(1 - p), with p clamped inside the logs."""
    pv = ad.value(p)
    if np.any(pv < 0.0) or np.any(pv > 1.0):
        raise ValueError("acceptance probability outside [0, 1]")
    return ad.where(accepted, _log_clamped(p), _log_clamped(ad.sub(1.0, p)))


def forward_log_density(rec, alpha, log_mass, with_acceptance, analytic_entropy=False):
    lq = log_q_u(rec.u, rec.v_prev, alpha, log_mass, analytic_entropy)
    if not with_acceptance:
        return lq
    return ad.add(lq, _log_branch(rec.p_accept, rec.accepted))


def reverse_log_density(log_rv, p_rev, accepted, with_acceptance):
    """log r_V plus, with acceptance, the log reverse-acceptance term per branch."""
    if not with_acceptance:
        return log_rv
    return ad.add(log_rv, _log_branch(p_rev, accepted))


def reverse_accept_prob(z, v, pot, step_size, n_leapfrog, log_mass, mode="simple", correction=None):
    """P(A = 1 | s_t): exactly 1 when H(revHD(s_t)) <= H(s_t), otherwise the
    converged-chain value exp(H(s_t) - H(revHD(s_t))), optionally shifted by a
    learned tanh correction and clipped to [0, 1].

    Returns ``(p, h_rev, h_now)``.
    """
    inv_mass = ad.exp(ad.neg(log_mass))
    z_r, v_r, bad = integrate(pot, z, ad.neg(v), step_size, n_leapfrog, inv_mass)
    # revHD = negate . HD . negate; kinetic energy is symmetric so the final
    # negation does not change H
    h_now = ad.add(pot.energy(z), kinetic_energy(v, inv_mass))
    if np.any(bad):
        z_r = ad.where(bad[..., None], z, z_r)
        v_r = ad.where(bad[..., None], v, v_r)
    h_rev = ad.add(pot.energy(z_r), kinetic_energy(v_r, inv_mass))
    delta = ad.sub(h_now, h_rev)
    simple = ad.exp(ad.minimum(delta, 0.0))
    if mode == "simple":
        p = simple
    elif mode == "nn":
        if correction is None:
            raise ValueError("nn mode needs the network correction")
        p = ad.clip(ad.add(simple, correction), 0.0, 1.0)
    else:
        raise ValueError(f"unknown reverse acceptance mode {mode!r}")
    certain = ad.value(h_rev) <= ad.value(h_now)
    if np.ndim(certain) == 0:
        certain = np.asarray(certain)
    p = ad.where(certain, 1.0, p)
    if np.any(bad):
        p = ad.where(bad, 0.0, p)
    return p, h_rev, h_now


def reverse_state(trace: ChainTrace, pot, t):
    """Position/momentum of revHD(s_t) for step ``t`` (1-based), numerically."""
    rec = trace.steps[t - 1]
    inv_mass = np.exp(-ad.value(trace.log_mass))
    z_r, v_r, bad = integrate(pot, ad.value(rec.z), -ad.value(rec.v), ad.value(trace.step_size),
                              trace.n_leapfrog, inv_mass)
    return z_r, -v_r, bad


def delta_cancellation_check(trace: ChainTrace, pot, atol=1e-8) -> bool:
    """Verify the position identities behind the cancelled Dirac terms.

    Accepted moves: revHD(s_t) lands on z_{t-1} (within ``atol``). Rejected
    moves: z_t equals z_{t-1} exactly.
    """
    for t, rec in enumerate(trace.steps, start=1):
        acc = np.asarray(rec.accepted, dtype=bool)
        z_prev, z_now = ad.value(rec.z_prev), ad.value(rec.z)
        if np.any(~acc):
            if not np.array_equal(z_now[~acc], z_prev[~acc]):
                return False
        if np.any(acc):
            z_r, _, bad = reverse_state(trace, pot, t)
            if np.any(bad[acc]):
                return False
            if np.max(np.abs(z_r[acc] - z_prev[acc])) >= atol:
                return False
    return True


# --- assembling the bound ---------------------------------------------------------

def make_potential(models: HmcviModels, params, x):
    if models.spec.generative == "bernoulli":
        return VaeJointPotential(x, models.decoder, params)
    return ConjugateGaussianPotential(x)


@dataclass
class BoundNoise:
    z0: np.ndarray
    chain: ChainNoise

    @classmethod
    def draw(cls, rng, n, dim, n_hmc):
        return cls(rng.standard_normal((n, dim)), ChainNoise.draw(rng, n, dim, n_hmc))

    def frozen(self, trace: ChainTrace) -> "BoundNoise":
        return BoundNoise(self.z0, ChainNoise.from_trace(trace, self.chain))


def assemble_bound(models: HmcviModels, params, x, rng=None, noise: BoundNoise | None = None,
                   options: BoundOptions | None = None):
    """Sample one chain per datum and evaluate the bound.

    ``params`` may hold ndarrays (numeric evaluation) or graph leaves
    (differentiable). Returns ``(bound per datum, BoundTerms, trace, noise)``.
    """
    options = options or BoundOptions()
    spec = models.spec
    x = np.asarray(x, dtype=np.float64)
    n, d, T = x.shape[0], spec.latent_dim, spec.n_hmc
    if noise is None:
        noise = BoundNoise.draw(rng, n, d, T)
    with_acc = spec.accept_mode != "off"
    pot = make_potential(models, params, x)

    q0 = models.encode(params, x)
    z0 = q0.sample(noise.z0)
    log_mass = models.mass_log_diag(params, x)
    alpha = models.alpha(params)
    eps = models.step_size(params)
    trace = run_chain_batch(pot, z0, T, eps, spec.n_leapfrog, alpha, log_mass, with_acc, noise.chain)

    zero = np.zeros(n)
    cancel = options.cancel_v0 and not spec.partial
    log_q0 = ad.neg(q0.entropy()) if options.analytic_entropy else q0.log_prob(z0)
    if cancel:
        log_fkin_v0 = zero
    elif options.analytic_entropy:
        log_fkin_v0 = ad.add(zero, ad.neg(gaussian_entropy(log_mass, d)))
    else:
        log_fkin_v0 = log_fkin(trace.v0, log_mass)

    z_T, v_T = trace.z_final, trace.v_final
    log_p_joint = pot.log_joint(z_T)
    if T == 0 and cancel:
        log_r_final = zero
    elif T == 0 and not spec.partial:
        log_r_final = _merged_final_t0(models, params, z_T, x, v_T, options, log_mass)
    else:
        log_r_final = models.final_momentum(params, z_T, x).log_prob(v_T)

    terms = BoundTerms(log_p_joint, log_q0, log_fkin_v0, log_r_final)
    for rec in trace.steps:
        t = rec.t
        terms.forward.append(forward_log_density(rec, alpha, log_mass, with_acc, options.analytic_entropy))
        if t == 1 and cancel:
            log_rv = zero
        elif t == 1 and not spec.partial and options.v0_reverse == "fkin":
            log_rv = log_fkin(rec.v_prev, log_mass)
        else:
            head = models.reverse_momentum(params, rec.z_prev, t, x, rec.u if spec.partial else None)
            log_rv = head.log_prob(rec.v_prev)
        p_rev = None
        if with_acc:
            corr = None
            if spec.accept_mode == "nn":
                corr = models.reverse_accept_correction(params, rec.z, rec.v, t, x)
            p_rev, _, _ = reverse_accept_prob(rec.z, rec.v, pot, eps, spec.n_leapfrog, log_mass,
                                              spec.accept_mode, corr)
        terms.reverse.append(reverse_log_density(log_rv, p_rev, rec.accepted, with_acc))
    total = terms.total()
    return total, terms, trace, noise


def _merged_final_t0(models, params, z, x, v, options, log_mass):
    # chain of length zero without cancellation: r_final is r_V at t = 1
    if options.v0_reverse == "fkin":
        return log_fkin(v, log_mass)
    if models.rv is None:
        raise ValueError("a chain of length zero has no arrival-momentum network")
    return models.reverse_momentum(params, z, 1, x).log_prob(v)


def elbo(models: HmcviModels, params, x, rng):
    """Standard single-sample ELBO log p(x, z) - log q0(z|x)."""
    x = np.asarray(x, dtype=np.float64)
    pot = make_potential(models, params, x)
    q0 = models.encode(params, x)
    z = q0.sample(rng.standard_normal((x.shape[0], models.spec.latent_dim)))
    return ad.sub(pot.log_joint(z), q0.log_prob(z))
