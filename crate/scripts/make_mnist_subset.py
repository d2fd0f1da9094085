#!/usr/bin/env python3
"""Build a small class-balanced MNIST subset in IDX format.

The source is the per-digit JSON files shipped with the `mnist` npm package
(`npm pack mnist`), whose pixels are stored as floats in [0, 1]. Pixels are
mapped back to bytes with round(255 * v). Images are interleaved by class, so
image k*10 + c is the k-th sample of digit c.

usage: make_mnist_subset.py <package/src/digits> <out_dir> [per_class]
"""

import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main() -> None:
    digits_dir = Path(sys.argv[1])
    out_dir = Path(sys.argv[2])
    per_class = int(sys.argv[3]) if len(sys.argv) > 3 else 200
    pixels = SIDE * SIDE

    per_digit = []
    for c in range(10):
        raw = json.loads((digits_dir / f"{c}.json").read_text())["data"]
        count = len(raw) // pixels
        if count < per_class:
            sys.exit(f"digit {c} has only {count} samples")
        per_digit.append(raw)

    images = bytearray()
    labels = bytearray()
    for k in range(per_class):
        for c in range(10):
            block = per_digit[c][k * pixels : (k + 1) * pixels]
            images.extend(min(255, max(0, round(255 * v))) for v in block)
            labels.append(c)

    n = per_class * 10
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "mnist-subset-images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, SIDE, SIDE))
        f.write(images)
    with open(out_dir / "mnist-subset-labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels)
    print(f"wrote {n} images to {out_dir}")


if __name__ == "__main__":
    main()
