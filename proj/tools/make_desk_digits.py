#!/usr/bin/env python3
# Copyright 2026 The KESI-Desk Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Builds the desk-scale digit corpus in IDX format.

Source: the MIT-licensed `mnist` npm package (10,000 MNIST digits stored as
per-class JSON arrays of pixel/255 values). Samples are interleaved round-robin
over classes so every index prefix is class balanced; the first 5,000 form the
training split and the next 1,000 the test split.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_desk_digits.py package/src/digits data/desk-digits
"""
import json
import struct
import sys
from pathlib import Path

SIDE = 28
TRAIN, TEST = 5000, 1000


def load_class(path):
    values = json.loads(path.read_text())["data"]
    pixels = bytes(round(v * 255) for v in values)
    n = len(pixels) // (SIDE * SIDE)
    return [pixels[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)]


def write_idx(out_dir, stem, images, labels):
    with open(out_dir / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(out_dir / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    classes = [load_class(src / f"{d}.json") for d in range(10)]
    order = []
    for j in range(max(len(c) for c in classes)):
        for d, c in enumerate(classes):
            if j < len(c):
                order.append((c[j], d))
    order = order[:TRAIN + TEST]
    train, test = order[:TRAIN], order[TRAIN:]
    write_idx(dst, "train", [x for x, _ in train], [y for _, y in train])
    write_idx(dst, "test", [x for x, _ in test], [y for _, y in test])


if __name__ == "__main__":
    main()
