"""Write the 5,000-image MNIST subset shipped with mlxtend as gzipped IDX files.

    pip install mlxtend
    python scripts/make_digits_idx.py data/

The CSV holds 784 pixel columns followed by the label column.
"""

import gzip
import sys
from pathlib import Path

import numpy as np

from uapsga.data import write_idx


def main(out_dir="data"):
    import mlxtend.data

    src = Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "digits5k-images-idx3-ubyte.gz", pixels)
    write_idx(out / "digits5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} images to {out}/ (class counts {np.bincount(labels).tolist()})")


if __name__ == "__main__":
    main(*sys.argv[1:])
