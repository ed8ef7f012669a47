"""Scaled comparison of plain VI against HMCVI on the digit subset.

Both arms start from the same VI model trained for 100 epochs and then
train for 100 more epochs each, so every model sees 200 epochs. Takes
about 17 minutes on one core. Run ``demos/prepare_mnist.py`` first.

    python demos/mnist_vi_vs_hmcvi.py runs/
"""
import sys
from pathlib import Path

from hmcvi.training import ExperimentConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs")
base = ExperimentConfig.from_json(Path(__file__).parent / "configs" / "mnist_vi.json").to_dict()

pre = train(ExperimentConfig.from_dict({**base, "epochs": 100}), out / "pre")
print("pretrained VI, best validation bound", pre.best_valid)

arms = {
    "vi": {},
    "hmcvi": {"n_hmc": 3, "n_leapfrog": 4, "mass_mode": "global"},
}
best = {}
for name, extra in arms.items():
    cfg = ExperimentConfig.from_dict({**base, **extra, "epochs": 100, "warm_start": str(out / "pre" / "last.npz")})
    best[name] = train(cfg, out / name).best_valid
    print(name, "best validation bound", best[name])

print(f"HMCVI - VI = {best['hmcvi'] - best['vi']:+.3f} nats")
