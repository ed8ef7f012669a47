"""Learnable components: MLPs, diagonal Gaussian heads, the HMCVI model set,
initialization, warm starting and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = {
    "softplus": ad.softplus,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "tanh": ad.tanh,
    "linear": lambda a: a,
}


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network layout.

    ``activations`` has one entry per layer (hidden layers then output layer);
    ``heads`` splits the output layer into named chunks.
    """

    input_dim: int
    hidden: tuple
    output_dim: int
    activations: tuple
    heads: tuple = ()

    def __post_init__(self):
        sizes = (self.input_dim,) + tuple(self.hidden) + (self.output_dim,)
        if any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")
        if len(self.activations) != len(self.hidden) + 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.heads and sum(n for _, n in self.heads) != self.output_dim:
            raise ValueError("head sizes must sum to the output width")

    @property
    def sizes(self):
        return (self.input_dim,) + tuple(self.hidden) + (self.output_dim,)

    def n_params(self) -> int:
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))


class Mlp:
    def __init__(self, spec: MlpSpec, prefix: str):
        self.spec = spec
        self.prefix = prefix

    def param_names(self):
        out = []
        for i in range(len(self.spec.sizes) - 1):
            out += [f"{self.prefix}.W{i}", f"{self.prefix}.b{i}"]
        return out

    def init(self, rng, std=0.01) -> dict:
        s = self.spec.sizes
        params = {}
        for i in range(len(s) - 1):
            params[f"{self.prefix}.W{i}"] = rng.normal(0.0, std, size=(s[i], s[i + 1]))
            params[f"{self.prefix}.b{i}"] = rng.normal(0.0, std, size=(s[i + 1],))
        return params

    def forward(self, params, x, keep=False):
        """Apply the network. With ``keep`` also return per-layer (pre, post)."""
        h = x
        layers = []
        for i, act in enumerate(self.spec.activations):
            pre = ad.add(ad.matmul(h, params[f"{self.prefix}.W{i}"]), params[f"{self.prefix}.b{i}"])
            h = _ACTIVATIONS[act](pre)
            layers.append((pre, h))
        return (h, layers) if keep else h

    __call__ = forward

    def split(self, out):
        """Split the output into the declared heads."""
        if not self.spec.heads:
            return out
        res, start = {}, 0
        for name, n in self.spec.heads:
            res[name] = ad.getitem(out, (Ellipsis, slice(start, start + n)))
            start += n
        return res

    def input_grad(self, params, layers, out_grad):
        """Vector-Jacobian product of the network w.r.t. its input.

        Built from graph ops so that the result is itself differentiable
        (needed when the network defines a force inside a leapfrog trajectory).
        ``layers`` is the record from ``forward(..., keep=True)``.
        """
        g = out_grad
        for i in reversed(range(len(layers))):
            pre, h = layers[i]
            act = self.spec.activations[i]
            if act == "softplus":
                g = ad.mul(g, ad.sigmoid(pre))
            elif act == "relu":
                g = ad.mul(g, (ad.value(pre) > 0).astype(float))
            elif act == "sigmoid":
                g = ad.mul(g, ad.mul(h, ad.sub(1.0, h)))
            elif act == "tanh":
                g = ad.mul(g, ad.sub(1.0, ad.mul(h, h)))
            elif act == "exp":
                g = ad.mul(g, h)
            g = ad.matmul(g, ad.transpose(params[f"{self.prefix}.W{i}"]))
        return g


# --- diagonal Gaussians ---------------------------------------------------------

@dataclass
class DiagonalGaussianHead:
    """Mean and variance arrays (or graph nodes) of a diagonal Gaussian."""

    mean: object
    log_var: object

    @property
    def var(self):
        return ad.exp(self.log_var)

    @property
    def std(self):
        return ad.exp(ad.mul(self.log_var, 0.5))

    def log_prob(self, x):
        return gaussian_log_prob(x, self.mean, self.log_var)

    def sample(self, noise):
        return ad.add(self.mean, ad.mul(self.std, noise))

    def entropy(self):
        return gaussian_entropy(self.log_var)


def gaussian_log_prob(x, mean, log_var):
    """Row-wise log N(x; mean, diag exp(log_var))."""
    diff = ad.sub(x, mean)
    quad = ad.div(ad.mul(diff, diff), ad.exp(log_var))
    d = ad.value(x).shape[-1]
    return ad.mul(ad.add(ad.sum(ad.add(quad, log_var), axis=-1), d * LOG_2PI), -0.5)


def gaussian_entropy(log_var, dim=None):
    """Entropy 0.5 * sum(log 2 pi sigma^2 + 1) of a diagonal Gaussian."""
    lv = ad.value(log_var)
    d = lv.shape[-1] if dim is None else dim
    return ad.mul(ad.add(ad.sum(log_var, axis=-1), d * (LOG_2PI + 1.0)), 0.5)


# --- HMCVI model set ------------------------------------------------------------

@dataclass
class ModelSpec:
    """Architecture and HMC switches of an HMCVI model."""

    data_dim: int = 784
    latent_dim: int = 2
    hidden: tuple = (200, 200)
    generative: str = "bernoulli"  # "bernoulli" | "conjugate"
    n_hmc: int = 0
    n_leapfrog: int = 4
    alpha_mode: str = "zero"  # "zero" | "learned" | "fixed"
    alpha_value: float = 0.0
    mass_mode: str = "identity"  # "identity" | "global" | "nn"
    mass_hidden: int = 200
    accept_mode: str = "off"  # "off" | "simple" | "nn"
    init_std: float = 0.01
    init_step_size: float = 0.05
    learn_step_size: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.generative not in ("bernoulli", "conjugate"):
            raise ValueError(f"unknown generative model {self.generative!r}")
        if self.alpha_mode not in ("zero", "learned", "fixed"):
            raise ValueError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.mass_mode not in ("identity", "global", "nn"):
            raise ValueError(f"unknown mass mode {self.mass_mode!r}")
        if self.accept_mode not in ("off", "simple", "nn"):
            raise ValueError(f"unknown acceptance mode {self.accept_mode!r}")
        if self.n_hmc < 0 or self.n_leapfrog < 1:
            raise ValueError("n_hmc must be >= 0 and n_leapfrog >= 1")
        if not -1.0 < self.alpha_value < 1.0 and self.alpha_mode == "fixed":
            raise ValueError("fixed alpha must lie strictly inside (-1, 1)")
        if self.generative == "conjugate" and (self.latent_dim != self.data_dim):
            raise ValueError("conjugate model needs data_dim == latent_dim")

    @property
    def partial(self) -> bool:
        return self.alpha_mode != "zero"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class HmcviModels:
    """All networks of one HMCVI configuration.

    Parameter groups share name prefixes: ``encoder``, ``decoder``, ``rv``,
    ``rfinal``, ``racc``, ``mass`` and ``hmc``.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        d, n, h = spec.latent_dim, spec.data_dim, spec.hidden
        relu_layers = ("relu",) * len(h)
        self.encoder = Mlp(MlpSpec(n, h, 2 * d, relu_layers + ("linear",),
                                   (("mean", d), ("log_var", d))), "encoder")
        self.decoder = None
        if spec.generative == "bernoulli":
            self.decoder = Mlp(MlpSpec(d, h, n, ("softplus",) * len(h) + ("linear",)), "decoder")
        self.rv = self.rfinal = self.racc = self.mass_net = None
        if spec.n_hmc > 0:
            # arrival-momentum model: inputs x, z, t (+ u with partial updates)
            rv_in = n + d + 1 + (d if spec.partial else 0)
            self.rv = Mlp(MlpSpec(rv_in, h, 2 * d, relu_layers + ("linear",),
                                  (("mean", d), ("log_var", d))), "rv")
            if spec.accept_mode == "nn":
                self.racc = Mlp(MlpSpec(n + 2 * d + 1, h, 1, relu_layers + ("tanh",)), "racc")
        if spec.partial:
            self.rfinal = Mlp(MlpSpec(n + d + 1, h, 2 * d, relu_layers + ("linear",),
                                      (("mean", d), ("log_var", d))), "rfinal")
        if spec.mass_mode == "nn":
            self.mass_net = Mlp(MlpSpec(n, (spec.mass_hidden,), d, ("relu", "linear")), "mass")

    def networks(self):
        return [m for m in (self.encoder, self.decoder, self.rv, self.rfinal,
                            self.racc, self.mass_net) if m is not None]

    def init_params(self, rng, std=None) -> dict:
        std = self.spec.init_std if std is None else std
        params = {}
        for net in self.networks():
            params.update(net.init(rng, std))
        s = self.spec
        if s.n_hmc > 0:
            params["hmc.log_eps"] = np.array(math.log(s.init_step_size))
        if s.alpha_mode == "learned":
            params["hmc.alpha_raw"] = rng.normal(0.0, std, size=())
        if s.mass_mode == "global":
            params["mass.log_diag"] = rng.normal(0.0, std, size=(s.latent_dim,))
        return params

    # -- component evaluations --

    def encode(self, params, x) -> DiagonalGaussianHead:
        heads = self.encoder.split(self.encoder(params, x))
        return DiagonalGaussianHead(heads["mean"], heads["log_var"])

    def decode_logits(self, params, z):
        return self.decoder(params, z)

    def decode(self, params, z):
        """Bernoulli rates over pixels."""
        return ad.sigmoid(self.decoder(params, z))

    def step_size(self, params):
        if "hmc.log_eps" in params:
            lp = params["hmc.log_eps"]
            return ad.exp(lp) if self.spec.learn_step_size else float(np.exp(ad.value(lp)))
        return self.spec.init_step_size

    def alpha(self, params):
        if self.spec.alpha_mode == "learned":
            return ad.tanh(params["hmc.alpha_raw"])
        if self.spec.alpha_mode == "fixed":
            return self.spec.alpha_value
        return 0.0

    def mass_log_diag(self, params, x):
        """Log of the diagonal mass entries, shape (d,) or (batch, d)."""
        s = self.spec
        if s.mass_mode == "identity":
            return np.zeros(s.latent_dim)
        if s.mass_mode == "global":
            return params["mass.log_diag"]
        return ad.clip(self.mass_net(params, x), -30.0, 30.0)

    def mass_conditioner(self, params, x):
        return ad.exp(self.mass_log_diag(params, x))

    def reverse_momentum(self, params, z, t, x, u=None) -> DiagonalGaussianHead:
        """Arrival-momentum density r_V(v | z, u, t, x); ``u`` omitted when alpha=0."""
        n = ad.value(z).shape[0]
        tcol = np.full((n, 1), float(t))
        parts = [x, z, tcol] + ([u] if self.spec.partial else [])
        heads = self.rv.split(self.rv(params, ad.concat(parts, axis=-1)))
        return DiagonalGaussianHead(heads["mean"], heads["log_var"])

    def final_momentum(self, params, z, x) -> DiagonalGaussianHead:
        """r_final(v_T | z_T, x); merged with r_V at t = T + 1 when alpha = 0."""
        T = self.spec.n_hmc
        if not self.spec.partial:
            return self.reverse_momentum(params, z, T + 1, x)
        n = ad.value(z).shape[0]
        inp = ad.concat([x, z, np.full((n, 1), float(T + 1))], axis=-1)
        heads = self.rfinal.split(self.rfinal(params, inp))
        return DiagonalGaussianHead(heads["mean"], heads["log_var"])

    def reverse_accept_correction(self, params, z, v, t, x):
        n = ad.value(z).shape[0]
        inp = ad.concat([x, z, v, np.full((n, 1), float(t))], axis=-1)
        return ad.getitem(self.racc(params, inp), (Ellipsis, 0))


def warm_start(target: dict, source: dict, prefixes=("encoder", "decoder")) -> dict:
    """Copy encoder/decoder parameters from a trained basic-VI model."""
    out = dict(target)
    for k, v in source.items():
        if k.split(".")[0] in prefixes:
            if k not in target:
                raise ValueError(f"warm start: parameter {k} missing in target model")
            if np.shape(target[k]) != np.shape(v):
                raise ValueError(f"warm start: shape mismatch for {k}: "
                                 f"{np.shape(v)} vs {np.shape(target[k])}")
            out[k] = np.array(v, dtype=np.float64, copy=True)
    return out


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, spec: ModelSpec, extra: dict | None = None):
    meta = {"version": CHECKPOINT_VERSION, "spec": spec.to_dict(), "extra": extra or {}}
    arrays = {f"param:{k}": np.asarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Return (params, spec, extra) from ``save_checkpoint``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
    return params, ModelSpec.from_dict(meta["spec"]), meta["extra"]
