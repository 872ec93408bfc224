"""Datasets and file formats: IDX arrays, synthetic digits, composite
scenes with ground-truth boxes, paired mask directories, and the metrics
CSV written by every training loop.

The digit bank is generated, not downloaded: each class has a polyline
skeleton that gets a random affine jitter and is rasterized with a
distance-field stroke, giving endless instance variety at 28x28. Files
round-trip through the same loaders the real formats use.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, GenerationError, ParameterError
from .imaging import read_png_gray, write_png_gray, resize_bilinear

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# --------------------------------------------------------------------------
# IDX files (big-endian header, u8 payload)

def read_idx_header(path) -> tuple[int, tuple[int, ...]]:
    """Parse just the magic and dimensions of an IDX file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: unknown IDX magic 0x{magic:08x} at byte offset 0")
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:need])
    return magic, dims


def load_idx(path) -> np.ndarray:
    """Load an IDX file: images come back float32 in [0, 1], labels int64."""
    path = Path(path)
    magic, dims = read_idx_header(path)
    raw = path.read_bytes()
    header = 4 + 4 * len(dims)
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch at byte offset {len(raw)} "
            f"(expected {expected} bytes for dims {dims})")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        return data.astype(np.float32) / 255.0
    return data.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write u8 images (N,H,W) or labels (N,) in IDX layout."""
    array = np.asarray(array)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise DimensionError(f"IDX arrays must be (N,H,W) or (N,), got {array.shape}")
    if array.dtype != np.uint8:
        if np.issubdtype(array.dtype, np.floating):
            array = (np.clip(array, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        else:
            array = array.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# --------------------------------------------------------------------------
# synthetic digits

def _arc(cx, cy, rx, ry, deg0, deg1, n=12):
    t = np.radians(np.linspace(deg0, deg1, n))
    return [(cx + rx * np.cos(a), cy - ry * np.sin(a)) for a in t]


def _digit_skeletons() -> dict[int, list[list[tuple[float, float]]]]:
    """Stroke polylines per class in a unit box, x right / y down."""
    return {
        0: [_arc(0.5, 0.5, 0.27, 0.37, 90, 450, 20)],
        1: [[(0.35, 0.26), (0.55, 0.12), (0.55, 0.88)]],
        2: [_arc(0.5, 0.3, 0.25, 0.18, 170, -10, 12)
            + [(0.28, 0.88), (0.75, 0.88)]],
        3: [_arc(0.48, 0.3, 0.24, 0.2, 150, -70, 12)
            + _arc(0.48, 0.68, 0.26, 0.21, 70, -150, 12)],
        4: [[(0.6, 0.1), (0.22, 0.62), (0.8, 0.62)], [(0.62, 0.3), (0.62, 0.9)]],
        5: [[(0.72, 0.12), (0.3, 0.12), (0.27, 0.48)]
            + _arc(0.47, 0.66, 0.26, 0.22, 130, -140, 14)],
        6: [_arc(0.52, 0.45, 0.26, 0.32, 75, 215, 12),
            _arc(0.49, 0.66, 0.22, 0.21, 90, 450, 18)],
        7: [[(0.25, 0.14), (0.75, 0.14), (0.42, 0.88)], [(0.34, 0.5), (0.62, 0.5)]],
        8: [_arc(0.5, 0.31, 0.2, 0.19, 90, 450, 16),
            _arc(0.5, 0.69, 0.24, 0.2, 90, 450, 16)],
        9: [_arc(0.52, 0.34, 0.21, 0.2, 90, 450, 16), [(0.73, 0.34), (0.7, 0.88)]],
    }


_SKELETONS = _digit_skeletons()


def render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """One jittered instance of a digit class as float32 in [0, 1]."""
    if digit not in _SKELETONS:
        raise ParameterError(f"digit class must be 0..9, got {digit}")
    if size < 8:
        raise ParameterError(f"digit raster must be at least 8 px, got {size}")
    angle = rng.uniform(-0.18, 0.18)
    sx, sy = rng.uniform(0.72, 1.02, 2)
    shear = rng.uniform(-0.12, 0.12)
    tx, ty = rng.uniform(-0.04, 0.04, 2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    mat = rot @ np.array([[sx, shear * sx], [0.0, sy]])

    segs_a, segs_b = [], []
    for stroke in _SKELETONS[digit]:
        pts = np.asarray(stroke, dtype=np.float64)
        pts = (pts - 0.5) @ mat.T + 0.5 + np.array([tx, ty])
        pts = pts + rng.normal(0.0, 0.008, pts.shape)
        pts = pts * (size - 1)
        segs_a.extend(pts[:-1])
        segs_b.extend(pts[1:])
    a = np.asarray(segs_a)[None, :, :]   # (1, S, 2)
    b = np.asarray(segs_b)[None, :, :]

    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    p = np.stack([jj.ravel(), ii.ravel()], axis=1)[:, None, :].astype(np.float64)  # (P, 1, 2)
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=2), 1e-12)
    t = np.clip(((p - a) * ab).sum(axis=2) / denom, 0.0, 1.0)
    closest = a + t[:, :, None] * ab
    dist = np.sqrt(((p - closest) ** 2).sum(axis=2)).min(axis=1).reshape(size, size)

    radius = rng.uniform(0.55, 1.15) * size / 28.0
    aa = 0.9 * size / 28.0
    img = np.clip((radius - dist) / aa + 1.0, 0.0, 1.0)
    return img.astype(np.float32)


def synth_digit_bank(per_class: int, rng: np.random.Generator,
                     size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """(images float32 (N,H,W) in [0,1], labels int64 (N,)), classes interleaved."""
    if per_class < 1:
        raise ParameterError(f"per_class must be positive, got {per_class}")
    images = np.empty((10 * per_class, size, size), dtype=np.float32)
    labels = np.empty(10 * per_class, dtype=np.int64)
    idx = 0
    for i in range(per_class):
        for digit in range(10):
            images[idx] = render_digit(digit, rng, size)
            labels[idx] = digit
            idx += 1
    return images, labels


# --------------------------------------------------------------------------
# composite scenes

@dataclass
class SampleRecord:
    """One manifest row plus the optional mask files that sit next to it."""

    moving_path: Path
    fixed_path: Path
    box: tuple[float, float, float, float]  # (xmin, ymin, xmax, ymax) pixels, max exclusive
    moving_mask_path: Path | None = None
    fixed_mask_path: Path | None = None


def tight_box(mask: np.ndarray, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """Pixel-tight (xmin, ymin, xmax, ymax) with exclusive max; empty mask errors."""
    on = np.asarray(mask) >= threshold
    if not on.any():
        raise ParameterError("cannot take the tight box of an empty mask")
    ys, xs = np.nonzero(on)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _place_disjoint(canvas: int, digit: int, count: int, rng: np.random.Generator,
                    attempts: int = 100) -> list[tuple[int, int]]:
    """Top-left corners for ``count`` digit-size squares with no overlap."""
    placed: list[tuple[int, int]] = []
    hi = canvas - digit
    for _ in range(count):
        for _ in range(attempts):
            x = int(rng.integers(0, hi + 1))
            y = int(rng.integers(0, hi + 1))
            if all(abs(x - px) >= digit or abs(y - py) >= digit for px, py in placed):
                placed.append((x, y))
                break
        else:
            raise GenerationError(
                f"could not place {count} disjoint {digit}px squares on a {canvas}px canvas")
    return placed


def tile_to_canvas(tile: np.ndarray, size: int) -> np.ndarray:
    """Repeat a square tile over a size x size canvas, cropping overhang.

    This is the conditioning layout the localizer consumes: tiling puts a
    complete copy of the pattern inside every tile-sized window, so each
    anchor location can compare its local scene content against the full
    pattern at native scale.
    """
    tile = np.asarray(tile)
    if tile.ndim != 2 or tile.shape[0] != tile.shape[1] or tile.shape[0] == 0:
        raise DimensionError(f"tile must be a non-empty square, got {tile.shape}")
    reps = -(-size // tile.shape[0])
    return np.tile(tile, (reps, reps))[:size, :size]


def gen_composites(out_dir, digits: np.ndarray, labels: np.ndarray, count: int,
                   rng: np.random.Generator, canvas_size: int = 112,
                   distractors: tuple[int, int] = (0, 3),
                   write_files: bool = True, condition_moving: bool = True) -> list[dict]:
    """Generate moving/fixed scene pairs with ground-truth boxes.

    Each sample: the moving image tiles one digit instance across the
    whole canvas (the conditioning layout the localizer consumes), or
    places it once at a random position with ``condition_moving=False``;
    the fixed image holds a different instance of the same class at a
    random position plus 0..n distractor digits of other classes, all
    placement squares disjoint. Returns one dict per sample (arrays plus
    box); with ``write_files`` the PNGs, ground-truth fixed masks, and a
    ``manifest.csv`` land in ``out_dir``.
    """
    digits = np.asarray(digits)
    labels = np.asarray(labels)
    dsize = digits.shape[1]
    if digits.ndim != 3 or digits.shape[2] != dsize:
        raise DimensionError(f"digit bank must be (N,S,S), got {digits.shape}")
    if canvas_size < 2 * dsize:
        raise ParameterError(f"canvas {canvas_size} too small for {dsize}px digits")
    dmin, dmax = distractors
    if not (0 <= dmin <= dmax):
        raise ParameterError(f"distractor range must satisfy 0 <= min <= max, got {distractors}")
    by_class = {c: np.nonzero(labels == c)[0] for c in range(10)}
    for c, idxs in by_class.items():
        if len(idxs) < 2:
            raise ParameterError(f"digit bank needs at least 2 instances of class {c}")

    out_dir = Path(out_dir)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    rows = []
    for i in range(count):
        target = int(rng.integers(0, 10))
        mov_i, fix_i = rng.choice(by_class[target], size=2, replace=False)
        n_extra = int(rng.integers(dmin, dmax + 1))

        for _layout in range(10):
            try:
                spots = _place_disjoint(canvas_size, dsize, 1 + n_extra, rng)
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(
                f"sample {i}: no disjoint layout for {1 + n_extra} digits after 10 tries")

        fixed = np.zeros((canvas_size, canvas_size), dtype=np.float32)
        fx, fy = spots[0]
        fixed[fy:fy + dsize, fx:fx + dsize] = np.maximum(
            fixed[fy:fy + dsize, fx:fx + dsize], digits[fix_i])
        fixed_mask = np.zeros_like(fixed)
        fixed_mask[fy:fy + dsize, fx:fx + dsize] = (digits[fix_i] >= 0.5).astype(np.float32)
        other = [c for c in range(10) if c != target]
        for (dx, dy) in spots[1:]:
            cls = other[int(rng.integers(0, len(other)))]
            inst = digits[int(rng.choice(by_class[cls]))]
            fixed[dy:dy + dsize, dx:dx + dsize] = np.maximum(
                fixed[dy:dy + dsize, dx:dx + dsize], inst)

        if condition_moving:
            moving = tile_to_canvas(digits[mov_i], canvas_size).astype(np.float32)
        else:
            moving = np.zeros_like(fixed)
            (mx, my), = _place_disjoint(canvas_size, dsize, 1, rng)
            moving[my:my + dsize, mx:mx + dsize] = digits[mov_i]

        bx0, by0, bx1, by1 = tight_box(fixed_mask)
        sample = {
            "moving": moving,
            "fixed": fixed,
            "fixed_mask": fixed_mask,
            "box": (float(bx0), float(by0), float(bx1), float(by1)),
            "target_class": target,
        }
        if write_files:
            stem = f"{i:05d}"
            write_png_gray(out_dir / f"{stem}_moving.png", moving)
            write_png_gray(out_dir / f"{stem}_fixed.png", fixed)
            write_png_gray(out_dir / f"{stem}_fixed_mask.png", fixed_mask)
            rows.append((f"{stem}_moving.png", f"{stem}_fixed.png", bx0, by0, bx1, by1))
        samples.append(sample)

    if write_files:
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in rows:
                writer.writerow(row)
    return samples


def load_manifest(path) -> list[SampleRecord]:
    """Read ``manifest.csv`` rows: moving_path,fixed_path,xmin,ymin,xmax,ymax."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 6:
                raise FormatError(f"{path}:{ln}: expected 6 fields, got {len(row)}")
            try:
                box = tuple(float(v) for v in row[2:])
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: bad box coordinate ({exc})") from exc
            if not (box[0] < box[2] and box[1] < box[3]):
                raise FormatError(f"{path}:{ln}: degenerate box {box}")
            mov = base / row[0]
            fix = base / row[1]
            if not mov.exists() or not fix.exists():
                raise FormatError(f"{path}:{ln}: referenced image missing")
            fixed_mask = fix.with_name(fix.stem + "_mask.png")
            moving_mask = mov.with_name(mov.stem + "_mask.png")
            records.append(SampleRecord(
                mov, fix, box,
                moving_mask if moving_mask.exists() else None,
                fixed_mask if fixed_mask.exists() else None))
    return records


def load_composites(manifest_path) -> dict:
    """Materialize a manifest into training arrays.

    Returns dict with moving/fixed u8 (M,S,S), boxes_px (M,4) corner form,
    and fixed_masks u8 where the files exist (None otherwise).
    """
    records = load_manifest(manifest_path)
    if not records:
        raise FormatError(f"{manifest_path}: manifest is empty")
    moving, fixed, boxes, masks = [], [], [], []
    have_masks = all(r.fixed_mask_path is not None for r in records)
    for r in records:
        moving.append((read_png_gray(r.moving_path) * 255).astype(np.uint8))
        fixed.append((read_png_gray(r.fixed_path) * 255).astype(np.uint8))
        boxes.append(r.box)
        if have_masks:
            masks.append((read_png_gray(r.fixed_mask_path) * 255).astype(np.uint8))
    return {
        "moving": np.stack(moving),
        "fixed": np.stack(fixed),
        "boxes_px": np.asarray(boxes, dtype=np.float64),
        "fixed_masks": np.stack(masks) if have_masks else None,
        "records": records,
    }


# --------------------------------------------------------------------------
# paired mask directories (matcher training data)

def gen_mask_pairs(out_dir, digits: np.ndarray, labels: np.ndarray, count: int,
                   rng: np.random.Generator, out_size: int = 28,
                   margin: float = 0.1) -> int:
    """Write ``count`` same-class mask pairs: tight box + margin, resized,
    binarized; files named ``<id>_moving.png`` / ``<id>_fixed.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_class = {c: np.nonzero(np.asarray(labels) == c)[0] for c in range(10)}
    for c, idxs in by_class.items():
        if len(idxs) < 2:
            raise ParameterError(f"digit bank needs at least 2 instances of class {c}")
    for i in range(count):
        cls = int(rng.integers(0, 10))
        a, b = rng.choice(by_class[cls], size=2, replace=False)
        for role, idx in (("moving", int(a)), ("fixed", int(b))):
            mask = crop_to_object(digits[idx], out_size, margin)
            write_png_gray(out_dir / f"{i:05d}_{role}.png", (mask >= 0.5).astype(np.float32))
    return count


def crop_to_object(image: np.ndarray, out_size: int, margin: float = 0.1) -> np.ndarray:
    """Tight box of the binarized object, expanded by ``margin`` per side,
    clipped, and resized to ``out_size`` square."""
    image = np.asarray(image, dtype=np.float64)
    x0, y0, x1, y1 = tight_box(image)
    w, h = x1 - x0, y1 - y0
    x0 = max(0, int(np.floor(x0 - margin * w)))
    y0 = max(0, int(np.floor(y0 - margin * h)))
    x1 = min(image.shape[1], int(np.ceil(x1 + margin * w)))
    y1 = min(image.shape[0], int(np.ceil(y1 + margin * h)))
    return resize_bilinear(image[y0:y1, x0:x1], out_size, out_size)


def load_masks_dir(path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Load ``<id>_moving.png`` / ``<id>_fixed.png`` pairs as {0,1} float32.

    Pixels >= 128 map to 1. Unpaired ids, non-grayscale files, and shape
    mismatches are warned about and skipped rather than failing the load.
    """
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"{path}: not a directory")
    by_id: dict[str, dict[str, Path]] = {}
    for f in sorted(path.glob("*.png")):
        stem = f.stem
        for suffix in ("_moving", "_fixed"):
            if stem.endswith(suffix):
                by_id.setdefault(stem[: -len(suffix)], {})[suffix[1:]] = f
                break
    pairs = []
    for sample_id, parts in sorted(by_id.items()):
        if "moving" not in parts or "fixed" not in parts:
            log.warning("masks: id '%s' is unpaired, skipping", sample_id)
            continue
        try:
            moving = read_png_gray(parts["moving"])
            fixed = read_png_gray(parts["fixed"])
        except FormatError as exc:
            log.warning("masks: %s, skipping", exc)
            continue
        if moving.shape != fixed.shape:
            log.warning("masks: id '%s' shape mismatch %s vs %s, skipping",
                        sample_id, moving.shape, fixed.shape)
            continue
        # read_png_gray scales by 255, so the >=128 rule becomes >=128/255
        thresh = 128.0 / 255.0
        pairs.append((sample_id,
                      (moving >= thresh).astype(np.float32),
                      (fixed >= thresh).astype(np.float32)))
    if not pairs:
        log.warning("masks: no usable pairs under %s", path)
    return pairs


# --------------------------------------------------------------------------
# metrics CSV

METRIC_HEADER = ("epoch", "split", "loss", "dice", "miou")


class MetricLog:
    """Append-only CSV with columns epoch,split,loss,dice,miou (6 decimals)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            fh.write(",".join(METRIC_HEADER) + "\n")

    def row(self, epoch: int, split: str, loss: float, dice: float, miou: float) -> None:
        with open(self.path, "a", newline="") as fh:
            fh.write(f"{epoch},{split},{loss:.6f},{dice:.6f},{miou:.6f}\n")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_HEADER:
            raise FormatError(f"{path}: bad metrics header {header}")
        for ln, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise FormatError(f"{path}:{ln}: expected 5 fields, got {len(row)}")
            rows.append({
                "epoch": int(row[0]),
                "split": row[1],
                "loss": float(row[2]),
                "dice": float(row[3]),
                "miou": float(row[4]),
            })
    return rows
