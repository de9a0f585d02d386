"""Image sources and pair assembly.

Sources are either MNIST-style IDX files or procedurally rendered glyphs (ten
stroke-template classes chosen to stay distinguishable under arbitrary
rotation). Augmented pairs carry full provenance metadata (class and instance
indices per side) so label rules can be audited after the fact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# fixed stream tags so each rng purpose is independent of the others
_TAG_GLYPH, _TAG_PAIR, _TAG_UNDERSAMPLE, _TAG_SPLIT = 101, 202, 303, 404


class DataError(Exception):
    """Base for dataset construction and I/O failures."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class UnsatisfiableRequestError(DataError):
    """The source set cannot support the requested pairing."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 class ids
    source: str  # "idx" | "synthetic"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class AugmentSpec:
    variant: str = "none"  # one of: R, B, RB, none
    rotation_range: tuple = (0.0, 2.0 * np.pi)
    n_patches: tuple = (4, 8)  # inclusive count range; a bare int means fixed
    patch_size_range: tuple = (4, 12)
    intensity_range: tuple = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("R", "B", "RB", "none"):
            raise DataError(f"unknown augmentation variant {self.variant!r}")
        lo, hi = self.rotation_range
        if not (0.0 <= lo <= hi <= 2.0 * np.pi + 1e-12):
            raise DataError(f"rotation_range out of order or bounds: {self.rotation_range}")
        if isinstance(self.n_patches, (int, np.integer)):
            self.n_patches = (int(self.n_patches), int(self.n_patches))
        if self.variant in ("B", "RB") and self.n_patches[0] < 1:
            raise DataError("clutter variants require n_patches >= 1")


@dataclass
class PairDataset:
    pairs: np.ndarray  # (N, 2, H, W) float32
    labels: np.ndarray  # (N,) uint8, 1 = changed
    meta: np.ndarray  # (N, 5) int32: label, class_a, class_b, idx_a, idx_b
    variant: str = "none"
    seed: int = 0
    split: str = "train"

    @property
    def counts(self) -> tuple:
        n_pos = int(self.labels.sum())
        return (n_pos, len(self.labels) - n_pos)

    def __len__(self) -> int:
        return len(self.labels)

    def audit_labels(self) -> int:
        """Number of pairs violating label == (class_a != class_b); 0 is healthy."""
        implied = (self.meta[:, 1] != self.meta[:, 2]).astype(np.uint8)
        bad = int((implied != self.labels).sum())
        bad += int((self.meta[:, 0] != self.labels).sum())
        # negatives must also use two distinct instances
        neg = self.labels == 0
        bad += int((self.meta[neg, 3] == self.meta[neg, 4]).sum())
        return bad

    def subset(self, index: np.ndarray) -> "PairDataset":
        return PairDataset(self.pairs[index], self.labels[index], self.meta[index],
                           self.variant, self.seed, self.split)


# ---------------------------------------------------------------- IDX format

def _read_exact(f, n: int, path) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise IdxTruncatedError(f"{path}: expected {n} bytes, got {len(b)}")
    return b


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Parse big-endian IDX image/label files into a normalized image set."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * rows * cols, images_path)
    with open(labels_path, "rb") as f:
        magic, n_lab = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        lab = _read_exact(f, n_lab, labels_path)
    if n != n_lab:
        raise IdxCountMismatchError(f"{n} images but {n_lab} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    return LabeledImageSet(images.astype(np.float32) / 255.0,
                           np.frombuffer(lab, dtype=np.uint8).astype(np.int64),
                           source="idx")


def save_idx(image_set: LabeledImageSet, images_path, labels_path) -> None:
    """Write the set back out as IDX (pixels quantized to uint8)."""
    imgs = np.round(np.clip(image_set.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, rows, cols = imgs.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(image_set.labels.astype(np.uint8).tobytes())


# ------------------------------------------------------------- glyph source

def _polyline_segments(points) -> list:
    pts = np.asarray(points, dtype=np.float64)
    return [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]


def _arc_points(r: float, start: float, stop: float, n: int = 24) -> np.ndarray:
    t = np.linspace(start, stop, n)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _glyph_template(cls: int) -> list:
    """Stroke polylines in [-1, 1] coordinates, one template per class.

    The ten shapes are pairwise non-congruent under rotation, so class identity
    survives the full-circle rotation augmentation.  Seven shapes carry some
    rotational self-symmetry (rotating them is a mild nuisance); L, F and J
    have none, so their appearance genuinely depends on orientation.
    """
    if cls == 0:  # circle
        return [_arc_points(0.9, 0, 2 * np.pi)]
    if cls == 1:  # single bar
        return [[(-0.9, 0.0), (0.9, 0.0)]]
    if cls == 2:  # L corner, unequal arms
        return [[(-0.5, 0.9), (-0.5, -0.9), (0.6, -0.9)]]
    if cls == 3:  # triangle
        p = _arc_points(0.95, np.pi / 2, np.pi / 2 + 2 * np.pi, 4)
        return [p]
    if cls == 4:  # cross
        return [[(-0.9, 0.0), (0.9, 0.0)], [(0.0, -0.9), (0.0, 0.9)]]
    if cls == 5:  # F: pole with two arms on one side
        return [[(-0.5, -0.9), (-0.5, 0.9)], [(-0.5, 0.9), (0.6, 0.9)],
                [(-0.5, 0.1), (0.35, 0.1)]]
    if cls == 6:  # square
        s = 0.78
        return [[(-s, -s), (s, -s), (s, s), (-s, s), (-s, -s)]]
    if cls == 7:  # J hook
        arc = _arc_points(0.5, 0.0, -np.pi) + np.array([0.0, -0.4])
        return [[(0.5, 0.9), (0.5, -0.4)], arc]
    if cls == 8:  # circle with a bar through it
        return [_arc_points(0.85, 0, 2 * np.pi), [(-0.85, 0.0), (0.85, 0.0)]]
    if cls == 9:  # three arms at 120 degrees
        arms = []
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            arms.append([(0.0, 0.0), (0.9 * np.cos(ang), 0.9 * np.sin(ang))])
        return arms
    raise DataError(f"no glyph template for class {cls}")


def _render_strokes(segments, hw: int, center, scale: float, width: float,
                    amplitude: float) -> np.ndarray:
    """Distance-field rasterization of line segments with a soft 1 px edge."""
    ys, xs = np.mgrid[0:hw, 0:hw]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    a = np.array([s[0] for s in segments])
    b = np.array([s[1] for s in segments])
    a = a * scale + center
    b = b * scale + center
    ab = b - a  # (S, 2)
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pix[:, None, :] - a[None, :, :]  # (P, S, 2)
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.sqrt(((pix[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    intensity = np.clip((width / 2 + 0.5 - d), 0.0, 1.0) * amplitude
    return intensity.reshape(hw, hw).astype(np.float32)


def synth_glyphs(n: int, seed: int, hw: int = 28) -> LabeledImageSet:
    """Render n jittered glyphs over 10 classes, maximally balanced and seeded.

    Class counts are floor(n/10) or ceil(n/10); assignment order is shuffled.
    """
    if n < 10:
        raise DataError(f"synth_glyphs needs n >= 10, got {n}")
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_GLYPH]))
    labels = order_rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.empty((n, hw, hw), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_GLYPH, i]))
        cls = int(labels[i])
        segs = []
        pose = rng.uniform(-0.1, 0.1)  # small pose jitter, distinct from variant R
        rot = np.array([[np.cos(pose), -np.sin(pose)], [np.sin(pose), np.cos(pose)]])
        for poly in _glyph_template(cls):
            pts = np.asarray(poly, dtype=np.float64)
            pts = pts + rng.normal(0.0, 0.015, size=pts.shape)
            pts = pts @ rot.T
            segs.extend(_polyline_segments(pts))
        center = (hw - 1) / 2.0 + rng.uniform(-0.75, 0.75, size=2)
        scale = (hw / 2.0 - 4.0) * rng.uniform(0.95, 1.05)
        # thick fixed-width strokes keep rotated views of one shape overlapping
        # in pixel space; variance then concentrates in shape and orientation
        img = _render_strokes(segs, hw, center, scale, width=4.0, amplitude=1.0)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledImageSet(images, labels, source="synthetic")


# ------------------------------------------------------------- augmentation

def _rotate_bilinear(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image center; zero fill outside the source frame."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    c, s = np.cos(angle), np.sin(angle)
    # inverse map of a CCW rotation
    sy = cy + (s * dx + c * dy)
    sx = cx + (c * dx - s * dy)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        v = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, v, 0.0)

    out = ((1 - fy) * (1 - fx) * sample(y0, x0)
           + (1 - fy) * fx * sample(y0, x0 + 1)
           + fy * (1 - fx) * sample(y0 + 1, x0)
           + fy * fx * sample(y0 + 1, x0 + 1))
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def _add_clutter(img: np.ndarray, spec: AugmentSpec, rng) -> np.ndarray:
    h, w = img.shape
    out = img.copy()
    lo, hi = spec.n_patches
    k = int(rng.integers(lo, hi + 1))
    ps_lo, ps_hi = spec.patch_size_range
    for _ in range(k):
        sh = int(rng.integers(ps_lo, ps_hi + 1))
        sw = int(rng.integers(ps_lo, ps_hi + 1))
        sh, sw = min(sh, h), min(sw, w)
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        noise = rng.uniform(spec.intensity_range[0], spec.intensity_range[1],
                            size=(sh, sw)).astype(img.dtype)
        region = out[top:top + sh, left:left + sw]
        # clutter sits behind the glyph: brighter of the two wins per pixel
        np.maximum(region, noise, out=region)
    return np.clip(out, 0.0, 1.0)


def augment(img: np.ndarray, spec: AugmentSpec, rng) -> np.ndarray:
    """Apply the variant's transforms; draws from rng in a fixed order."""
    out = img
    if spec.variant in ("R", "RB"):
        angle = float(rng.uniform(spec.rotation_range[0], spec.rotation_range[1]))
        out = _rotate_bilinear(out, angle)
    if spec.variant in ("B", "RB"):
        out = _add_clutter(out, spec, rng)
    if spec.variant == "none":
        out = img.copy()
    return out


# ------------------------------------------------------------ pair assembly

def _instance_index(labels: np.ndarray) -> dict:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def make_pairs(image_set: LabeledImageSet, spec: AugmentSpec, n_neg: int,
               n_pos: int, seed: int, split: str = "train") -> PairDataset:
    """Assemble labeled pairs: negatives within class, positives across classes.

    Each side is augmented independently, with one derived rng per pair index,
    so generation is position-deterministic.
    """
    by_class = _instance_index(image_set.labels)
    neg_classes = sorted(c for c, idx in by_class.items() if len(idx) >= 2)
    if n_neg > 0 and not neg_classes:
        raise UnsatisfiableRequestError("no class has two instances for negatives")
    if n_pos > 0 and len(by_class) < 2:
        raise UnsatisfiableRequestError("positives need at least two classes")
    all_classes = sorted(by_class)
    n = n_neg + n_pos
    h, w = image_set.images.shape[1:]
    pairs = np.empty((n, 2, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    meta = np.empty((n, 5), dtype=np.int32)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_PAIR, i]))
        positive = i >= n_neg
        if positive:
            ca, cb = rng.choice(len(all_classes), size=2, replace=False)
            ca, cb = all_classes[int(ca)], all_classes[int(cb)]
            ia = int(by_class[ca][rng.integers(len(by_class[ca]))])
            ib = int(by_class[cb][rng.integers(len(by_class[cb]))])
        else:
            ca = cb = neg_classes[int(rng.integers(len(neg_classes)))]
            pick = rng.choice(len(by_class[ca]), size=2, replace=False)
            ia, ib = int(by_class[ca][pick[0]]), int(by_class[ca][pick[1]])
        pairs[i, 0] = augment(image_set.images[ia], spec, rng)
        pairs[i, 1] = augment(image_set.images[ib], spec, rng)
        labels[i] = 1 if positive else 0
        meta[i] = (labels[i], ca, cb, ia, ib)
    return PairDataset(pairs, labels, meta, variant=spec.variant, seed=seed, split=split)


def undersample_negatives(ds: PairDataset, seed: int) -> PairDataset:
    """Drop random negatives until the classes balance; positives untouched."""
    n_pos, n_neg = ds.counts
    if n_pos < 1:
        raise DataError("undersampling needs at least one positive pair")
    if n_neg < n_pos:
        raise DataError(f"cannot undersample {n_neg} negatives to {n_pos}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_UNDERSAMPLE]))
    neg_idx = np.flatnonzero(ds.labels == 0)
    keep_neg = np.sort(rng.choice(neg_idx, size=n_pos, replace=False))
    keep = np.sort(np.concatenate([keep_neg, np.flatnonzero(ds.labels == 1)]))
    return ds.subset(keep)


def split_instances(image_set: LabeledImageSet, test_fraction: float,
                    seed: int) -> tuple:
    """Disjoint train/test instance pools; no image appears in both."""
    n = len(image_set)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_SPLIT]))
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    mk = lambda idx: LabeledImageSet(image_set.images[idx], image_set.labels[idx],
                                     image_set.source)
    return mk(train_idx), mk(test_idx)


# ------------------------------------------------------------ serialization

def save_pairs(ds: PairDataset, out_dir, stem: str = "pairs") -> dict:
    """Write the raw little-endian float32 pair block plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path = out_dir / f"{stem}.f32"
    meta_path = out_dir / f"{stem}.meta.i32"
    payload = np.ascontiguousarray(ds.pairs, dtype="<f4").tobytes()
    meta_payload = np.ascontiguousarray(ds.meta, dtype="<i4").tobytes()
    img_path.write_bytes(payload)
    meta_path.write_bytes(meta_payload)
    n_pos, n_neg = ds.counts
    sidecar = {
        "variant": ds.variant,
        "counts": {"n_pos": n_pos, "n_neg": n_neg},
        "seed": ds.seed,
        "split": ds.split,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta_sha256": hashlib.sha256(meta_payload).hexdigest(),
        "n": len(ds),
        "hw": [int(ds.pairs.shape[2]), int(ds.pairs.shape[3])],
        "files": {"pairs": img_path.name, "meta": meta_path.name},
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=1))
    return sidecar


def load_pairs(out_dir, stem: str = "pairs") -> PairDataset:
    out_dir = Path(out_dir)
    sidecar_path = out_dir / f"{stem}.json"
    if not sidecar_path.exists():
        raise DataError(f"dataset sidecar not found: {sidecar_path}")
    side = json.loads(sidecar_path.read_text())
    payload = (out_dir / side["files"]["pairs"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != side["sha256"]:
        raise DataError(f"pair payload hash mismatch under {out_dir}")
    meta_payload = (out_dir / side["files"]["meta"]).read_bytes()
    if hashlib.sha256(meta_payload).hexdigest() != side["meta_sha256"]:
        raise DataError(f"pair metadata hash mismatch under {out_dir}")
    n = side["n"]
    h, w = side["hw"]
    pairs = np.frombuffer(payload, dtype="<f4").reshape(n, 2, h, w).copy()
    meta = np.frombuffer(meta_payload, dtype="<i4").reshape(n, 5).copy()
    return PairDataset(pairs, meta[:, 0].astype(np.uint8), meta,
                       variant=side["variant"], seed=side["seed"], split=side["split"])


def dataset_hash(ds: PairDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.pairs, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(ds.meta, dtype="<i4").tobytes())
    return h.hexdigest()
