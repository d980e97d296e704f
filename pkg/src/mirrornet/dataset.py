"""Image/mask ingestion, preprocessing, group-respecting splits, dataset
statistics, and the synthetic mirror-scene generator.

On disk a sample is ``<stem>.ppm`` (P6, 8-bit RGB) plus ``<stem>_mask.pgm``
(P5, 8-bit, >=128 is mirror). Its group is read from ``<stem>.group`` when
present, otherwise it is the stem prefix before the first ``_``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import upsample_bilinear

MASK_THRESHOLD = 128
HIST_BINS = 8


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


# ---------------------------------------------------------------- PNM codec


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def decode_pnm(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode binary P5/P6 with maxval 255. Returns (H, W) or (H, W, 3) uint8."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{name}: unsupported image format {magic[:8]!r} (need binary P5/P6)")
    try:
        fields = []
        for _ in range(3):
            tok, pos = _read_token(buf, pos)
            fields.append(int(tok))
    except ValueError as exc:
        raise DatasetError(f"{name}: malformed PNM header") from exc
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{name}: only 8-bit PNM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    chans = 3 if magic == b"P6" else 1
    need = w * h * chans
    data = buf[pos:pos + need]
    if len(data) != need:
        raise DatasetError(f"{name}: truncated pixel data ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, 3).copy() if chans == 3 else arr.reshape(h, w).copy()


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DatasetError(f"PNM encoding needs uint8 data, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise DatasetError(f"cannot encode array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read(), str(path))


def write_pnm(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(arr))


# ---------------------------------------------------------------- records


@dataclass
class SampleRecord:
    image_path: Path | None
    mask_path: Path | None
    group: str
    image: np.ndarray | None = field(default=None, repr=False)  # (H, W, 3) uint8
    mask: np.ndarray | None = field(default=None, repr=False)  # (H, W) uint8 in {0, 1}

    @property
    def stem(self) -> str:
        if self.image_path is None:
            return self.group
        return self.image_path.stem

    def load(self) -> "SampleRecord":
        if self.image is None:
            self.image = read_pnm(self.image_path)
            if self.image.ndim != 3:
                raise DatasetError(f"{self.image_path}: expected an RGB (P6) image")
        if self.mask is None:
            raw = read_pnm(self.mask_path)
            if raw.ndim != 2:
                raise DatasetError(f"{self.mask_path}: expected a grayscale (P5) mask")
            self.mask = (raw >= MASK_THRESHOLD).astype(np.uint8)
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(
                f"{self.stem}: image {self.image.shape[:2]} and mask {self.mask.shape} differ in size")
        return self


def load_pairs(directory) -> list[SampleRecord]:
    """All ``<stem>.ppm`` / ``<stem>_mask.pgm`` pairs in lexicographic stem order."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"{d}: not a directory")
    names = set(os.listdir(d))
    images = {n[:-4] for n in names if n.endswith(".ppm")}
    masks = {n[:-9] for n in names if n.endswith("_mask.pgm")}
    for stem in sorted(images - masks):
        raise DatasetError(f"image {stem}.ppm has no mask {stem}_mask.pgm")
    for stem in sorted(masks - images):
        raise DatasetError(f"mask {stem}_mask.pgm has no image {stem}.ppm")
    records = []
    for stem in sorted(images):
        gfile = d / f"{stem}.group"
        group = gfile.read_text().strip() if gfile.exists() else stem.split("_", 1)[0]
        rec = SampleRecord(d / f"{stem}.ppm", d / f"{stem}_mask.pgm", group)
        records.append(rec.load())
    return records


def write_dataset(records, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        stem = rec.stem if rec.image_path else f"{rec.group}_{i:04d}"
        write_pnm(d / f"{stem}.ppm", rec.image)
        write_pnm(d / f"{stem}_mask.pgm", (rec.mask * 255).astype(np.uint8))
        (d / f"{stem}.group").write_text(rec.group + "\n")
        rec.image_path, rec.mask_path = d / f"{stem}.ppm", d / f"{stem}_mask.pgm"


# ---------------------------------------------------------------- preprocessing


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


def image_to_tensor(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (image.astype(np.float32) / 255.0).transpose(2, 0, 1)


def preprocess(record: SampleRecord, resolution: int, augment: bool = False, rng=None):
    """Resize to ``resolution`` (bilinear image, nearest mask) and optionally flip.

    Returns ``(image (3, R, R) float32, mask (1, R, R) float32)``.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    record.load()
    img = image_to_tensor(record.image)[None]
    if img.shape[2:] != (resolution, resolution):
        img = upsample_bilinear(img, resolution, resolution)
    mask = resize_nearest(record.mask, resolution, resolution).astype(np.float32)
    img, mask = img[0], mask[None]
    if augment:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        if rng.random() < 0.5:
            img, mask = img[:, :, ::-1], mask[:, :, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(mask)


# ---------------------------------------------------------------- splitting


def split_by_group(records, test_fraction: float, rng):
    """Assign whole groups to train or test, test size as close as possible to target.

    Groups are shuffled by ``rng``; an exact subset-sum search over group
    sizes then picks the test groups (first-found among equally close sums).
    """
    groups: dict[str, list] = {}
    for rec in records:
        if not rec.group:
            raise DatasetError(f"record {rec.stem} has no group id")
        groups.setdefault(rec.group, []).append(rec)
    if len(groups) < 2:
        raise DatasetError(f"need at least 2 groups to split, got {len(groups)}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    names = sorted(groups)
    names = [names[i] for i in rng.permutation(len(names))]
    sizes = [len(groups[n]) for n in names]
    total = sum(sizes)
    target = test_fraction * total

    # reach[s] = index of the group that first made sum s reachable (-1 for s=0)
    reach = {0: -1}
    for gi, sz in enumerate(sizes):
        for s in sorted(reach, reverse=True):
            t = s + sz
            if t not in reach:
                reach[t] = gi
    # both sides need at least one group
    candidates = [s for s in reach if 0 < s < total]
    best = min(candidates, key=lambda s: (abs(s - target), s))
    chosen = set()
    s = best
    while s:
        gi = reach[s]
        chosen.add(names[gi])
        s -= sizes[gi]
    test = [r for r in records if r.group in chosen]
    train = [r for r in records if r.group not in chosen]
    return train, test


# ---------------------------------------------------------------- statistics


@dataclass
class DatasetStats:
    area_bins: np.ndarray  # bin edges
    area_hist: np.ndarray  # counts per bin
    area_ratios: np.ndarray
    location_map: np.ndarray  # (H, W) in [0, 1]
    chi2: np.ndarray  # per-image chi-square contrast (skipped images excluded)
    chi2_skipped: int

    def records(self) -> str:
        lines = [f"n_images={len(self.area_ratios)}", f"chi2_skipped={self.chi2_skipped}"]
        for lo, hi, c in zip(self.area_bins[:-1], self.area_bins[1:], self.area_hist):
            lines.append(f"area_bin={lo:.2f}:{hi:.2f} count={int(c)}")
        if len(self.chi2):
            lines.append(f"chi2_mean={self.chi2.mean():.6f}")
        lines += [f"chi2={v:.6f}" for v in self.chi2]
        return "\n".join(lines)


def rgb_histogram(pixels: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Normalized joint RGB histogram over ``bins**3`` cells of (K, 3) uint8 pixels."""
    q = (pixels.astype(np.int64) * bins) // 256
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    h = np.bincount(idx, minlength=bins ** 3).astype(np.float64)
    return h / h.sum()


def chi2_distance(h_in: np.ndarray, h_out: np.ndarray) -> float:
    """``0.5 * sum (a - b)^2 / (a + b)`` over occupied bins.

    Bins empty in both histograms are skipped instead of padded with an
    epsilon, and the sum is taken with ``fsum``, so identical and disjoint
    histograms score exactly 0 and 1.
    """
    s = h_in + h_out
    occ = s > 0
    a, b, s = h_in[occ], h_out[occ], s[occ]
    # a bin used by one side only contributes its mass exactly
    terms = np.where((a > 0) & (b > 0), (a - b) ** 2 / s, s)
    return 0.5 * math.fsum(terms)


def compute_stats(records, area_bins: int = 10, map_size: int | None = None) -> DatasetStats:
    if not records:
        raise DatasetError("compute_stats needs at least one record")
    for r in records:
        r.load()
    if map_size is None:
        size = records[0].mask.shape
    else:
        size = (map_size, map_size)
    ratios = np.array([r.mask.mean() for r in records], dtype=np.float64)
    edges = np.linspace(0.0, 1.0, area_bins + 1)
    hist, _ = np.histogram(ratios, bins=edges)
    loc = np.zeros(size, dtype=np.float64)
    for r in records:
        m = r.mask if r.mask.shape == size else resize_nearest(r.mask, *size)
        loc += m
    loc /= len(records)
    chi, skipped = [], 0
    for r in records:
        m = r.mask.astype(bool)
        if m.all() or not m.any():
            skipped += 1
            continue
        chi.append(chi2_distance(rgb_histogram(r.image[m]), rgb_histogram(r.image[~m])))
    return DatasetStats(edges, hist, ratios, loc, np.array(chi), skipped)


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class SyntheticConfig:
    area_range: tuple = (0.05, 0.5)
    shapes: tuple = ("rect", "ellipse")
    frame_styles: int = 3  # distinct frame colours; shape x style = mirror types
    frame_width: int = 1
    brightness_shift: tuple = (10, 30)  # absolute 8-bit shift, random sign
    noise: float = 6.0


FRAME_COLOURS = np.array([[40, 30, 25], [200, 190, 170], [120, 80, 40], [90, 90, 100]])


def _background(rng, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] / res
    img = np.zeros((res, res, 3))
    base = rng.uniform(60, 190, size=3)
    for c in range(3):
        img[..., c] = base[c]
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            img[..., c] += rng.uniform(10, 35) * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    # a few flat "objects" make the reflected content recognisable scene content
    for _ in range(rng.integers(3, 7)):
        h, w = rng.integers(res // 10, res // 3, size=2)
        y, x = rng.integers(0, res - h), rng.integers(0, res - w)
        img[y:y + h, x:x + w] = rng.uniform(20, 235, size=3)
    return img


def _shape_mask(rng, res: int, shape: str, area_range) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    for _ in range(1000):
        area = rng.uniform(*area_range) * res * res
        aspect = rng.uniform(0.6, 1.6)
        if shape == "ellipse":
            area /= np.pi / 4
        h = int(round(np.sqrt(area * aspect)))
        w = int(round(np.sqrt(area / aspect)))
        # leave room for the frame so the region never touches the border
        if not (4 <= h <= res - 4 and 4 <= w <= res - 4):
            continue
        y0 = int(rng.integers(2, res - h - 1))
        x0 = int(rng.integers(2, res - w - 1))
        if shape == "rect":
            m = np.zeros((res, res), bool)
            m[y0:y0 + h, x0:x0 + w] = True
        else:
            cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
            m = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        ratio = m.mean()
        if area_range[0] <= ratio <= area_range[1]:
            return m
    raise RuntimeError("could not place a mirror inside the requested area range")


def _dilate(m: np.ndarray, r: int) -> np.ndarray:
    out = m.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def synthetic_scene(rng, res: int, cfg: SyntheticConfig, shape: str, style: int):
    img = _background(rng, res)
    mask = _shape_mask(rng, res, shape, cfg.area_range)
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    h, w = y1 - y0, x1 - x0
    # reflect a different part of the scene: horizontally flipped, brightness-shifted
    sy = int(rng.integers(0, res - h + 1))
    sx = int(rng.integers(0, res - w + 1))
    patch = img[sy:sy + h, sx:sx + w, :][:, ::-1].copy()
    shift = rng.uniform(*cfg.brightness_shift) * rng.choice([-1.0, 1.0])
    region = img[y0:y1, x0:x1]
    inside = mask[y0:y1, x0:x1]
    region[inside] = patch[inside] + shift
    ring = _dilate(mask, cfg.frame_width) & ~mask
    img[ring] = FRAME_COLOURS[style % len(FRAME_COLOURS)]
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def generate_synthetic(n: int, resolution: int, seed: int = 0,
                       config: SyntheticConfig | None = None) -> list[SampleRecord]:
    """``n`` seeded scenes; sample ``i`` draws from its own stream ``(seed, i)``."""
    if n < 1:
        raise ValueError("need at least one synthetic sample")
    cfg = config or SyntheticConfig()
    types = [(s, k) for s in cfg.shapes for k in range(cfg.frame_styles)]
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        shape, style = types[int(rng.integers(len(types)))]
        img, mask = synthetic_scene(rng, resolution, cfg, shape, style)
        group = f"{shape}{style}"
        records.append(SampleRecord(None, None, group, img, mask))
    return records
