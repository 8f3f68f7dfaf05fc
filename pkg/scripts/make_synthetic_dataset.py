#!/usr/bin/env python3
"""
Writes a small class-per-directory PNG tree for smoke runs.

Each class brightens one image quadrant (adenocarcinoma top-left, large
cell carcinoma top-right, squamous cell carcinoma bottom-left, normal
bottom-right) over a dim noisy background, so a working network separates
the classes within a few epochs.

Usage:
    python scripts/make_synthetic_dataset.py dataset/
    python scripts/make_synthetic_dataset.py dataset/ --per-class 40 --size 64
    python scripts/make_synthetic_dataset.py dataset/ --rgb --jpeg
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

# ── CONFIG ────────────────────────────────────────────────────────────────
CLASS_DIRS = [
    "adenocarcinoma",
    "large.cell.carcinoma",
    "squamous.cell.carcinoma",
    "normal",
]
BACKGROUND = 0.2
HIGHLIGHT = 0.8
NOISE = 0.05


def quadrant_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """uint8 ``[size, size]`` image with quadrant ``label`` bright."""
    img = np.full((size, size), BACKGROUND)
    half = size // 2
    r0 = 0 if label in (0, 1) else half
    c0 = 0 if label in (0, 2) else half
    img[r0:r0 + half, c0:c0 + half] = HIGHLIGHT
    img += rng.normal(0.0, NOISE, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def write_dataset(root, per_class: int = 10, size: int = 32, seed: int = 0,
                  rgb: bool = False, jpeg: bool = False) -> int:
    """Write ``per_class`` images per class under ``root``; return the total."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    ext = ".jpg" if jpeg else ".png"
    total = 0
    for label, name in enumerate(CLASS_DIRS):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            pixels = quadrant_image(label, size, rng)
            img = Image.fromarray(pixels)
            if rgb:
                img = img.convert("RGB")
            img.save(class_dir / f"{name}_{i:04d}{ext}")
            total += 1
    return total


def main():
    parser = argparse.ArgumentParser(description="Write a synthetic quadrant-brightness CT dataset")
    parser.add_argument("root", help="output directory")
    parser.add_argument("--per-class", type=int, default=10)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--rgb", action="store_true", help="save 3-channel images")
    parser.add_argument("--jpeg", action="store_true", help="save JPEG instead of PNG")
    args = parser.parse_args()

    if args.per_class < 1 or args.size < 2:
        print("[ERROR] --per-class must be >= 1 and --size >= 2", file=sys.stderr)
        return 1
    total = write_dataset(args.root, args.per_class, args.size, args.seed, args.rgb, args.jpeg)
    print(f"[OK] {total} images written to {args.root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
