"""Dataset ingestion: scan, decode, preprocess, split and batch CT images.

Layout on disk is ``<root>/.../<class-dir>/<image>.{png,jpg,jpeg}``: every
image's parent directory names its class through the class map. Images
may sit below intermediate folders (the public dataset ships
``train/``, ``test/`` and ``valid/``); those are pooled and re-split.

Preprocessing stages always run in this order:

  decode → grayscale → denoise → segment → morphology → resize → normalize

Only grayscale, resize and normalize are on by default.
"""

import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage as ndi
from skimage.filters import threshold_otsu

from ..errors import ConfigError, DataError, DecodeError, IngestionError
from .rng import Rng, make_rng

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}
LUMINANCE_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_RATIOS = (0.70, 0.15, 0.15)

# Directory names used by the public chest CT-scan dataset.
DEFAULT_CLASS_MAP: Dict[str, int] = {
    "adenocarcinoma": 0,
    "adenocarcinoma_left.lower.lobe_T2_N0_M0_Ib": 0,
    "large.cell.carcinoma": 1,
    "large.cell.carcinoma_left.hilum_T2_N2_M0_IIIa": 1,
    "squamous.cell.carcinoma": 2,
    "squamous.cell.carcinoma_left.hilum_T1_N2_M0_IIIa": 2,
    "normal": 3,
}


class PreprocessOptions(BaseModel):
    """Stage switches. Resize and normalize always run."""
    model_config = ConfigDict(extra="forbid")

    size: int = Field(64, ge=1)
    grayscale: bool = True
    denoise: bool = False
    segment: bool = False
    morphology: bool = False
    median_size: int = Field(3, ge=1)
    morphology_size: int = Field(3, ge=1)


@dataclass
class Sample:
    id: str                 # path relative to the dataset root, posix separators
    pixels: np.ndarray      # [c, size, size] float32 in [0, 1]
    label: int


@dataclass
class DatasetSplit:
    train: List[Sample]
    validation: List[Sample]
    test: List[Sample]
    seed: int
    ratios: Tuple[float, float, float]

    def part(self, name: str) -> List[Sample]:
        parts = {"train": self.train, "val": self.validation,
                 "validation": self.validation, "test": self.test}
        if name not in parts:
            raise KeyError(f"unknown split {name!r}; expected train, val or test")
        return parts[name]

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


# ── Scanning ─────────────────────────────────────────────────────────────

def scan_dataset(root, class_map: Optional[Dict[str, int]] = None) -> List[Tuple[str, int]]:
    """Return ``(relative_path, label)`` for every image, sorted by relative path."""
    class_map = DEFAULT_CLASS_MAP if class_map is None else class_map
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist or is not a directory")

    entries: List[Tuple[str, int]] = []
    for path in root.rglob("*"):
        if not path.is_file() or path.name.startswith("."):
            continue
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        rel = path.relative_to(root).as_posix()
        class_dir = path.parent.name
        if path.parent == root:
            raise IngestionError(f"image {rel} is not inside a class directory")
        if class_dir not in class_map:
            raise IngestionError(
                f"unknown class directory '{class_dir}' (from {rel}); "
                f"add it to class_map or remove it"
            )
        entries.append((rel, int(class_map[class_dir])))

    if not entries:
        raise DataError(f"no PNG/JPEG images found under {root}")
    entries.sort(key=lambda e: e[0])

    counts = np.bincount([label for _, label in entries])
    logger.info("Scanned %d images under %s (per class: %s)", len(entries), root, counts.tolist())
    return entries


# ── Decoding ─────────────────────────────────────────────────────────────

def decode_image(data: bytes, path: str = "<bytes>") -> np.ndarray:
    """Decode an 8-bit PNG/JPEG into ``[c, h, w]`` float32 in [0, 1].

    Grayscale images give one channel, everything else three channels in
    R, G, B order (alpha dropped, palettes expanded).
    """
    try:
        with Image.open(io.BytesIO(data)) as img:
            if img.format not in ("PNG", "JPEG"):
                raise DecodeError(path, f"unsupported format {img.format}")
            img.load()
            if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise DecodeError(path, f"unsupported {img.mode} pixel mode (8-bit only)")
            if img.mode in ("1", "L", "LA"):
                img = img.convert("L")
            elif img.mode != "RGB":
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from exc

    if arr.ndim == 2:
        return arr[None, :, :]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# ── Preprocessing stages ─────────────────────────────────────────────────

def to_grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img
    weights = np.asarray(LUMINANCE_WEIGHTS, dtype=np.float64)[:, None, None]
    return np.sum(img * weights, axis=0, keepdims=True)


def median_denoise(img: np.ndarray, size: int = 3) -> np.ndarray:
    return np.stack([ndi.median_filter(ch, size=size, mode="nearest") for ch in img])


def otsu_mask(img: np.ndarray) -> np.ndarray:
    """Foreground mask from a global Otsu threshold on luminance.

    A constant image has no threshold; its mask is all foreground.
    """
    lum = img.mean(axis=0)
    if lum.max() == lum.min():
        return np.ones(lum.shape, dtype=bool)
    return lum > threshold_otsu(lum)


def smooth_mask(mask: np.ndarray, size: int = 3) -> np.ndarray:
    """Binary open then close; the edge is padded so borders are not eroded."""
    pad = size // 2
    structure = np.ones((size, size), dtype=bool)
    padded = np.pad(mask, pad, mode="edge")
    padded = ndi.binary_opening(padded, structure=structure)
    padded = ndi.binary_closing(padded, structure=structure)
    return padded[pad:pad + mask.shape[0], pad:pad + mask.shape[1]]


def smooth_gray(img: np.ndarray, size: int = 3) -> np.ndarray:
    """Grey-level open then close, used when morphology runs without a mask."""
    return np.stack([
        ndi.grey_closing(ndi.grey_opening(ch, size=(size, size), mode="nearest"),
                         size=(size, size), mode="nearest")
        for ch in img
    ])


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([
        ndi.map_coordinates(ch.astype(np.float64), grid, order=1, mode="nearest")
        for ch in img
    ])


def preprocess(img: np.ndarray, opts: Optional[PreprocessOptions] = None) -> np.ndarray:
    """Apply the configured stages; returns ``[c, size, size]`` float32 in [0, 1]."""
    opts = opts or PreprocessOptions()
    out = np.asarray(img, dtype=np.float64)

    if opts.grayscale:
        out = to_grayscale(out)
    elif out.shape[0] == 1:
        out = np.repeat(out, 3, axis=0)

    if opts.denoise:
        out = median_denoise(out, opts.median_size)

    if opts.segment:
        mask = otsu_mask(out)
        if opts.morphology:
            mask = smooth_mask(mask, opts.morphology_size)
        out = out * mask[None, :, :]
    elif opts.morphology:
        out = smooth_gray(out, opts.morphology_size)

    out = resize_bilinear(out, opts.size, opts.size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ── Loading with cache ───────────────────────────────────────────────────

def _file_stamp(path: Path) -> Tuple[int, int]:
    try:
        st = path.stat()
    except OSError:
        return (-1, -1)
    return (st.st_size, st.st_mtime_ns)


def _cache_key(root: Path, entries: Sequence[Tuple[str, int]], opts: PreprocessOptions) -> str:
    """Stable key from the scan list, each file's size and mtime, and the options."""
    stamps = [_file_stamp(root / rel) for rel, _ in entries]
    payload = json.dumps({"entries": list(entries), "stamps": stamps, "opts": opts.model_dump()},
                         sort_keys=True)
    return hashlib.md5(payload.encode()).hexdigest()


def _load_one(root: Path, entry: Tuple[str, int], opts: PreprocessOptions) -> Sample:
    rel, label = entry
    path = root / rel
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DecodeError(rel, str(exc)) from exc
    return Sample(rel, preprocess(decode_image(data, rel), opts), label)


def load_samples(root, entries: Sequence[Tuple[str, int]],
                 opts: Optional[PreprocessOptions] = None,
                 workers: int = 1,
                 cache_dir=None) -> List[Sample]:
    """Decode and preprocess every entry, keeping scan order.

    With ``cache_dir`` the preprocessed tensors are stored in an ``.npz``
    file keyed by the scan list, file stamps and options, and reused on the
    next run. Editing an image changes its stamp and so the key.
    """
    opts = opts or PreprocessOptions()
    root = Path(root)

    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"samples_{_cache_key(root, entries, opts)}.npz"
        if cache_path.exists():
            try:
                with np.load(cache_path, allow_pickle=False) as cached:
                    pixels, labels, ids = cached["pixels"], cached["labels"], cached["ids"]
                logger.info("Cache HIT: %d samples from %s", len(ids), cache_path.name)
                return [Sample(str(i), p, int(l)) for i, p, l in zip(ids, pixels, labels)]
            except (OSError, KeyError, ValueError) as exc:
                logger.warning("Cache read failed (%s); rebuilding", exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda e: _load_one(root, e, opts), entries))
    else:
        samples = [_load_one(root, e, opts) for e in entries]

    if cache_path is not None:
        try:
            os.makedirs(cache_path.parent, exist_ok=True)
            np.savez(cache_path,
                     pixels=np.stack([s.pixels for s in samples]),
                     labels=np.array([s.label for s in samples], dtype=np.int64),
                     ids=np.array([s.id for s in samples]))
            logger.info("Cache WRITE: %d samples -> %s", len(samples), cache_path.name)
        except OSError as exc:
            logger.warning("Cache write failed: %s", exc)
    return samples


# ── Split / batches ──────────────────────────────────────────────────────

def split_holdout(samples: Sequence[Sample],
                  ratios: Tuple[float, float, float] = DEFAULT_RATIOS,
                  seed: int = 1000) -> DatasetSplit:
    """Seeded shuffle, then ``floor(n·r_train)`` / ``floor(n·r_val)`` / remainder."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(samples)
    if n == 0:
        raise DataError("cannot split an empty sample list")

    order = make_rng(seed, "split").permutation(n)
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    shuffled = [samples[i] for i in order]
    split = DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
        ratios=ratios,  # type: ignore[arg-type]
    )
    logger.info("Split %d samples -> train %d / val %d / test %d (seed %d)",
                n, *split.sizes(), seed)
    return split


def batches(part: Sequence[Sample], batch_size: int, shuffle: bool = False,
            rng: Optional[Rng] = None,
            num_classes: int = 4) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(pixels [b,c,h,w], onehot [b,k])``; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(part))
    else:
        order = np.arange(len(part))

    eye = np.eye(num_classes, dtype=np.float32)
    for start in range(0, len(order), batch_size):
        chosen = [part[i] for i in order[start:start + batch_size]]
        pixels = np.stack([s.pixels for s in chosen]).astype(np.float32, copy=False)
        onehot = eye[[s.label for s in chosen]]
        yield pixels, onehot
