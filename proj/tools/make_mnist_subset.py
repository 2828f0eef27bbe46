#!/usr/bin/env python3
"""Write the 5,000-digit MNIST subset shipped inside the mlxtend wheel as IDX files.

Usage: make_mnist_subset.py <mlxtend wheel> <out dir>

The subset is class-balanced (500 per digit). It is shuffled with a fixed seed
and split into 3,000 train / 2,000 test images.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    table = np.loadtxt(io.StringIO(raw), delimiter=",")
    # 784 pixel columns followed by the label.
    labels = table[:, -1].astype(np.uint8)
    images = table[:, :-1].reshape(-1, 28, 28)
    order = np.random.default_rng(20240611).permutation(len(labels))
    labels, images = labels[order], images[order]
    write_idx_images(out / "train-images.idx3-ubyte", images[:3000])
    write_idx_labels(out / "train-labels.idx1-ubyte", labels[:3000])
    write_idx_images(out / "test-images.idx3-ubyte", images[3000:])
    write_idx_labels(out / "test-labels.idx1-ubyte", labels[3000:])


if __name__ == "__main__":
    main()
