"""Fit HMCVI to a model whose marginal likelihood is known in closed form.

z ~ N(0, 1) and x | z ~ N(z, 1), so log p(x) = log N(x; 0, 2). A trained
chain should bring the bound and the importance-sampling estimate close
to the exact value.

    python demos/conjugate_oracle.py
"""
import numpy as np

from hmcvi.data import synthetic_conjugate
from hmcvi.training import ExperimentConfig, evaluate, train

x_test, exact = synthetic_conjugate(1000, np.random.default_rng(99))

for accept in ("off", "simple"):
    cfg = ExperimentConfig(
        latent_dim=1, n_hmc=2, n_leapfrog=4, generative="conjugate", accept_mode=accept, hidden=(),
        lr=0.01, epochs=30, init_std=0.1, init_step_size=0.2,
        dataset={"kind": "conjugate", "n": 2000, "n_valid": 500},
    )
    res = train(cfg)
    m = evaluate(res.models, res.best_params, x_test, cfg, n_nll=200)
    print(f"acceptance {accept:6s}  bound {m['bound']:.4f}  IS {-m['nll']:.4f}  exact {exact.mean():.4f}"
          f"  (IS over first {m['n_nll']}: exact {exact[:m['n_nll']].mean():.4f})  accept {m['accept_rates']}")
    print("  learned step size", float(np.exp(res.best_params["hmc.log_eps"])))
