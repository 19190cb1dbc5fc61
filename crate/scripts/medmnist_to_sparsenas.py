#!/usr/bin/env python3
"""Convert a MedMNIST ``.npz`` archive into a sparsenas dataset directory.

Usage: medmnist_to_sparsenas.py breastmnist.npz out_dir [--name breastmnist]

The archive must hold ``{train,val,test}_images`` (uint8, ``[N, H, W]`` or
``[N, H, W, C]``) and ``{train,val,test}_labels`` (``[N, 1]``).
"""

import argparse
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("archive", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--name", default=None)
    args = ap.parse_args()

    data = np.load(args.archive)
    images, labels, sizes = [], [], {}
    for split in SPLITS:
        x = data[f"{split}_images"]
        if x.ndim == 3:
            x = x[..., None]
        if x.dtype != np.uint8:
            raise SystemExit(f"{split}_images: expected uint8, got {x.dtype}")
        y = data[f"{split}_labels"].reshape(len(x), -1)
        if y.shape[1] != 1:
            raise SystemExit(f"{split}_labels: multi-label archives are not supported")
        images.append(x)
        labels.append(y[:, 0].astype("<u2"))
        sizes[split] = len(x)

    images = np.concatenate(images)
    labels = np.concatenate(labels)
    n, h, w, c = images.shape
    args.out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "name": args.name or args.archive.stem,
        "num_images": int(n),
        "height": int(h),
        "width": int(w),
        "channels": int(c),
        "num_classes": int(labels.max()) + 1,
        "splits": sizes,
    }
    (args.out / "meta.json").write_text(json.dumps(meta, indent=2))
    (args.out / "images.bin").write_bytes(np.ascontiguousarray(images).tobytes())
    (args.out / "labels.bin").write_bytes(labels.tobytes())
    start = 0
    for split in SPLITS:
        idx = range(start, start + sizes[split])
        (args.out / f"{split}.txt").write_text("".join(f"{i}\n" for i in idx))
        start += sizes[split]
    print(f"wrote {n} images ({h}x{w}x{c}, {meta['num_classes']} classes) to {args.out}")


if __name__ == "__main__":
    main()
