"""Build the 5,000-digit subset used by the scaled MNIST run.

The digits come from the ``mnist_5k.csv.gz`` file that ships inside the
mlxtend wheel (500 images per class, 784 pixel columns then the label).
Pass ``--csv`` to use a copy you already have; otherwise the wheel is
fetched with pip and the file extracted from it.

    python demos/prepare_mnist.py --out data
"""
import argparse
import gzip
import shutil
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

from hmcvi.data import load_idx, prepare_mnist_subset


def fetch_csv(workdir: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
                    "-d", str(workdir), "mlxtend"], check=True)
    wheel = next(workdir.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        member = next(n for n in zf.namelist() if n.endswith("mnist_5k.csv.gz"))
        zf.extract(member, workdir)
    out = workdir / "mnist_5k.csv"
    with gzip.open(workdir / member) as src, open(out, "wb") as dst:
        shutil.copyfileobj(src, dst)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--csv", type=Path)
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = args.csv or fetch_csv(Path(tmp))
        images, labels = prepare_mnist_subset(args.out, csv_path)
    x, y = load_idx(images, labels)
    print(f"{images}: {x.shape[0]} images, {x.shape[1]} pixels, classes {sorted(set(y.tolist()))}")


if __name__ == "__main__":
    main()
