#!/usr/bin/env python3
"""Rebuild data/mnist/ from the 10,000-digit MNIST sample shipped in the `mnist` npm package.

The package stores each class as a JSON list of pixel intensities rounded to
three decimals; multiplying by 255 and rounding recovers the original bytes.
Digits are shuffled with a fixed seed and split 9000 train / 1000 test, then
written as gzipped IDX files.

Usage: python3 scripts/mnist_subset.py [--package-dir DIR] [--out data/mnist]
"""
import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

TEST_COUNT = 1000
SEED = 20180801


def fetch_package(workdir: Path) -> Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True)
    with tarfile.open(workdir / "mnist-1.1.0.tgz") as tar:
        tar.extractall(workdir)
    return workdir / "package"


def write_idx(path: Path, images, labels_path: Path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(labels_path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package-dir", type=Path)
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    args = ap.parse_args()

    tmp = tempfile.TemporaryDirectory()
    pkg = args.package_dir or fetch_package(Path(tmp.name))

    samples = []
    for digit in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            img = [min(255, max(0, round(v * 255))) for v in data[i : i + 784]]
            samples.append((img, digit))

    random.Random(SEED).shuffle(samples)
    test, train = samples[:TEST_COUNT], samples[TEST_COUNT:]
    args.out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_idx(
            args.out / f"{name}-images-idx3-ubyte.gz",
            [s[0] for s in split],
            args.out / f"{name}-labels-idx1-ubyte.gz",
            [s[1] for s in split],
        )
        print(f"{name}: {len(split)} images")


if __name__ == "__main__":
    main()
