#!/usr/bin/env python3
"""Write the 5000-sample MNIST subset bundled with mlxtend as IDX files.

Usage: make_mnist_subset.py <mlxtend wheel or mnist_5k.csv.gz> <out_dir>

Fetch the wheel with `pip download mlxtend --no-deps`. Rows are 784 pixel
values followed by the label.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def read_rows(src: Path):
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    return [list(map(int, map(float, line.split(",")))) for line in text.splitlines() if line]


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    rows = read_rows(Path(sys.argv[1]))
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    n = len(rows)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for r in rows:
            f.write(bytes(r[:784]))
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(r[784] for r in rows))
    print(f"wrote {n} samples to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
