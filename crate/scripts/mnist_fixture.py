"""Build the small MNIST IDX fixture used by the test suite.

The images come from the 5,000-sample MNIST subset bundled with the
`mlxtend` wheel (500 per class, from the canonical MNIST training set).
A fixed-seed shuffle selects 2,200 of them; the first 2,000 form the
training split and the last 200 the held-out split.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/mnist_fixture.py /tmp/mlx/mlxtend-*.whl crates/core/tests/data
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def main(wheel, out_dir, count=2200, seed=20221):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    order = np.random.RandomState(seed).permutation(len(table))[:count]
    pixels = table[order, :-1].astype(np.uint8)
    labels = table[order, -1].astype(np.uint8)
    with gzip.GzipFile(f"{out_dir}/mnist-subset-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, count, 28, 28))
        f.write(pixels.tobytes())
    with gzip.GzipFile(f"{out_dir}/mnist-subset-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, count))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
