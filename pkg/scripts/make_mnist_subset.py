"""Build data/mnist10k/ (gzip IDX) from the JSON digits shipped in the npm
``mnist`` package (10000 real MNIST digits, pixels stored as v/255).

usage: python scripts/make_mnist_subset.py PATH/TO/package/src/digits [OUT_DIR]
"""
import json
import sys
from pathlib import Path

import numpy as np

from tinyfqt.data import write_idx


def main(argv):
    src = Path(argv[1])
    out = Path(argv[2]) if len(argv) > 2 else Path(__file__).resolve().parents[1] / "data" / "mnist10k"
    out.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], np.float64)
        pix = np.rint(flat * 255.0).astype(np.uint8).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    # interleave classes so the file order is not sorted by label
    order = np.random.default_rng(0).permutation(len(labels))
    write_idx(out / "images-idx3-ubyte.gz", images[order])
    write_idx(out / "labels-idx1-ubyte.gz", labels[order])
    print(f"wrote {len(labels)} samples to {out}")


if __name__ == "__main__":
    main(sys.argv)
