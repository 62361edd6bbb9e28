"""Dataset ingestion: label taxonomy, stereo manifests, PNM images, resizing,
and seeded synthetic datasets for desk-scale verification.

Only binary PPM (P6) and PGM (P5) images are supported, 8-bit; pixel values
are scaled by 1/255 with no mean subtraction.  Anything compressed must be
converted to PNM upstream.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CorruptHeader,
    CountMismatch,
    ParseError,
    TruncatedPayload,
    UnknownLabel,
    UnsupportedFormat,
)
from .tensor import FeatureMap3

# Fixed 20-label taxonomy: 16 hand gestures, 3 diver poses, 1 null class.
# Index order is stable; synthetic datasets with n classes use the first n.
GESTURE_LABELS = (
    "start", "up", "end", "here", "take-photo", "four", "carry",
    "tessellation", "two", "down", "one", "backward", "three", "five",
    "number-delimiter", "boat",
)
POSE_LABELS = ("turning-horizontally", "turning-vertically", "free-swim")
NULL_LABEL = "null"
ALL_LABELS = GESTURE_LABELS + POSE_LABELS + (NULL_LABEL,)

_LABEL_INDEX = {name: i for i, name in enumerate(ALL_LABELS)}

_DFMV_MAGIC = b"DFMV"

# Synthetic feature clusters share one fixed noise scale so the margin flag
# alone controls how much neighbouring classes overlap.
SYNTH_NOISE_SIGMA = 0.35

# Nested similarity over the taxonomy: labels performed alike (same hand
# count, then same hand face, then same finger family) sit progressively
# closer in feature space.  The synthetic generator walks this hierarchy
# with decreasing offset scales, so class geometry resembles real gesture
# data where the hardest confusions are between sibling gestures.
SIMILARITY_HIERARCHY = (
    (  # one hand, back face
        ("end", "up"),
        ("down", "here"),
        ("number-delimiter", "start"),
    ),
    (  # one hand, front face
        ("backward",),
        ("four", "five"),
        ("three", "take-photo"),
        ("two", "one"),
    ),
    (("carry",), ("boat",), ("tessellation",)),  # two hands
    (("turning-horizontally",), ("turning-vertically",), ("free-swim",)),
    ((NULL_LABEL,),),
)


def label_index(name: str) -> int:
    return _LABEL_INDEX[name]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StereoSample:
    left: str
    right: str
    label: str
    location: str = ""


@dataclass
class Manifest:
    """Parsed stereo-pair manifest.

    declared_counts, when present, were validated against the actual
    per-label tallies at load time.
    """

    samples: list[StereoSample]
    declared_counts: Optional[dict[str, int]] = None

    def label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sample in self.samples:
            counts[sample.label] = counts.get(sample.label, 0) + 1
        return counts

    @property
    def total_images(self) -> int:
        """Two images per stereo pair."""
        return 2 * len(self.samples)


def load_manifest(path, check_files: bool = False) -> Manifest:
    """Load a CSV manifest with header ``left,right,label,location``.

    Lines starting with ``#`` are comments; ``#expect <label>=<count>``
    declares a per-label pair count that must match the actual tally.
    With check_files=True every referenced image must exist on disk.
    """
    path = Path(path)
    samples: list[StereoSample] = []
    declared: dict[str, int] = {}
    header_seen = False
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("expect "):
                    try:
                        label, count = body[len("expect "):].split("=", 1)
                        declared[label.strip()] = int(count)
                    except ValueError:
                        raise ParseError(lineno, f"bad expect directive {line!r}")
                continue
            fields = next(csv.reader([line]))
            if not header_seen:
                if [f.strip() for f in fields] != ["left", "right", "label", "location"]:
                    raise ParseError(lineno, f"bad header {line!r}")
                header_seen = True
                continue
            if len(fields) != 4:
                raise ParseError(lineno, f"expected 4 fields, got {len(fields)}")
            left, right, label, location = (f.strip() for f in fields)
            if not left or not right:
                raise ParseError(lineno, "missing image path")
            if label not in _LABEL_INDEX:
                raise UnknownLabel(lineno, label)
            samples.append(StereoSample(left, right, label, location))
    if not header_seen:
        raise ParseError(1, "missing header row")
    if check_files:
        base = path.parent
        for sample in samples:
            for rel in (sample.left, sample.right):
                target = base / rel
                if not target.exists():
                    raise FileNotFoundError(f"manifest references missing file {target}")
    manifest = Manifest(samples, declared or None)
    if declared:
        actual = manifest.label_counts()
        for label, count in declared.items():
            if actual.get(label, 0) != count:
                raise CountMismatch(
                    f"label {label!r}: declared {count}, found {actual.get(label, 0)}")
    return manifest


# ---------------------------------------------------------------------------
# PNM decode / encode
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Image:
    """Decoded raster, (height, width, 3) float64 in [0, 1].

    May be rectangular; resize_image squares it into a FeatureMap3.
    """

    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def decode_image(path) -> Image:
    """Decode a binary PPM (P6) or PGM (P5, replicated to 3 channels)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise CorruptHeader(f"{path}: no magic")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"{path}: magic {magic!r}; only binary P5/P6 supported")

    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise CorruptHeader(f"{path}: header ended early")
        ch = data[pos]
        if ch == ord("#"):
            while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        if ch in (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C):
            pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C, ord("#")):
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise CorruptHeader(f"{path}: non-numeric header token {token!r}")
        tokens.append(int(token))
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise CorruptHeader(f"{path}: bad dimensions {width}x{height}")
    if maxval > 255 or maxval < 1:
        raise UnsupportedFormat(f"{path}: only 8-bit images supported (maxval {maxval})")
    # exactly one whitespace byte separates header and payload
    if pos >= len(data) or data[pos] not in (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C):
        raise CorruptHeader(f"{path}: missing header terminator")
    pos += 1

    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    pixels = raw.astype(np.float64) / 255.0
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return Image(pixels)


def encode_ppm(pixels: np.ndarray, path) -> None:
    """Write (h, w, 3) values in [0, 1] as binary P6 (quantized to 8 bits)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise UnsupportedFormat(f"P6 writer needs (h, w, 3), got {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    # align-corners mapping; a single output sample reads the source centre
    if n_dst == 1:
        return np.array([(n_src - 1) / 2.0])
    return np.arange(n_dst, dtype=np.float64) * (n_src - 1) / (n_dst - 1)


def _resample_axis(arr: np.ndarray, n_dst: int) -> np.ndarray:
    """Linear resample along axis 0."""
    n_src = arr.shape[0]
    coords = _axis_coords(n_src, n_dst)
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = (coords - lo).reshape(-1, *([1] * (arr.ndim - 1)))
    return arr[lo] * (1.0 - frac) + arr[hi] * frac


def resize_image(img, target: int) -> FeatureMap3:
    """Bilinear resample to target x target, align-corners convention.

    Source coordinate for output index t is t*(S-1)/(T-1) per axis (centre
    sample when T = 1).  Accepts an Image or a FeatureMap3.
    """
    if target < 1:
        raise ValueError(f"target side must be >= 1, got {target}")
    pixels = img.pixels if isinstance(img, Image) else img.data
    rows = _resample_axis(pixels, target)
    cols = _resample_axis(np.swapaxes(rows, 0, 1), target)
    return FeatureMap3(np.swapaxes(cols, 0, 1))


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

@dataclass
class VectorDataset:
    """Fused feature vectors with integer labels indexing label_names."""

    features: np.ndarray          # (n, dim) float64
    labels: np.ndarray            # (n,) int64
    label_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _synth_labels(classes: int) -> list[str]:
    if classes <= len(ALL_LABELS):
        return list(ALL_LABELS[:classes])
    return list(ALL_LABELS) + [f"extra-{i}" for i in range(classes - len(ALL_LABELS))]


def _similarity_paths(names: list[str]) -> list[tuple[int, int]]:
    """(family index, subfamily index) per label; unknown labels get their own."""
    path_of: dict[str, tuple[int, int]] = {}
    sub_counter = 0
    for fi, family in enumerate(SIMILARITY_HIERARCHY):
        for subfamily in family:
            for name in subfamily:
                path_of[name] = (fi, sub_counter)
            sub_counter += 1
    next_family = len(SIMILARITY_HIERARCHY)
    out = []
    for name in names:
        if name in path_of:
            out.append(path_of[name])
        else:
            out.append((next_family, sub_counter))
            next_family += 1
            sub_counter += 1
    return out


def synth_vectors(
    classes: int,
    per_class: int,
    dim: int,
    margin: float,
    seed: int,
    noise: float = SYNTH_NOISE_SIGMA,
) -> VectorDataset:
    """Seeded Gaussian clusters whose centroids are at least margin apart.

    Centroid layout follows the taxonomy's nested similarity: every class
    centroid is family centre + subfamily offset + class offset with scales
    4:2:1, so sibling classes are the close (hard) pairs exactly as related
    gestures are in real footage.  The whole layout is rescaled so the
    closest centroid pair sits exactly at the margin, while the noise scale
    stays fixed: small margins mean real overlap between siblings, large
    margins mean cleanly separable classes.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    rng = np.random.default_rng(seed)
    names = _synth_labels(classes)
    paths = _similarity_paths(names)
    n_families = max(p[0] for p in paths) + 1
    n_subfamilies = max(p[1] for p in paths) + 1
    family_centres = rng.normal(size=(n_families, dim))
    subfamily_offsets = rng.normal(size=(n_subfamilies, dim))
    class_offsets = rng.normal(size=(classes, dim))
    centroids = np.empty((classes, dim))
    for i, (fi, si) in enumerate(paths):
        centroids[i] = (4.0 * family_centres[fi]
                        + 2.0 * subfamily_offsets[si]
                        + class_offsets[i])
    if classes > 1:
        min_dist = np.inf
        for i in range(classes):
            delta = centroids[i + 1:] - centroids[i]
            if delta.size:
                min_dist = min(min_dist, float(np.sqrt((delta ** 2).sum(axis=1)).min()))
        centroids *= margin / min_dist
    features = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for cls in range(classes):
        block = slice(cls * per_class, (cls + 1) * per_class)
        features[block] = centroids[cls] + noise * rng.normal(size=(per_class, dim))
        labels[block] = cls
    return VectorDataset(features, labels, names)


def synth_stereo_images(
    classes: int,
    per_class: int,
    side: int,
    seed: int,
    out_dir,
) -> Path:
    """Write a synthetic stereo-pair image dataset and its manifest.

    Class identity is a bright square patch whose grid position and channel
    depend on the class index; the right image is the left one shifted by
    exactly one column (with wrap-around) as a stand-in for disparity.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = _synth_labels(classes)
    rows = ["left,right,label,location"]
    grid_cols = 5
    patch = max(2, side // 6)
    for cls in range(classes):
        gr, gc = divmod(cls, grid_cols)
        r0 = min(1 + gr * (patch + 2), side - patch)
        c0 = min(1 + gc * (patch + 1), side - patch)
        for k in range(per_class):
            base = rng.uniform(0.0, 0.15, size=(side, side, 3))
            base[r0:r0 + patch, c0:c0 + patch, cls % 3] = rng.uniform(0.8, 1.0)
            left8 = np.clip(np.rint(base * 255.0), 0, 255).astype(np.uint8)
            right8 = np.roll(left8, 1, axis=1)
            left_name = f"{names[cls]}_{k:04d}_L.ppm"
            right_name = f"{names[cls]}_{k:04d}_R.ppm"
            for name, arr in ((left_name, left8), (right_name, right8)):
                with open(out_dir / name, "wb") as fh:
                    fh.write(f"P6\n{side} {side}\n255\n".encode("ascii"))
                    fh.write(arr.tobytes())
            rows.append(f"{left_name},{right_name},{names[cls]},synthetic")
    manifest_path = out_dir / "manifest.csv"
    manifest_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# fused-vector binary files
# ---------------------------------------------------------------------------

def save_vectors(ds: VectorDataset, path) -> None:
    """Serialize a VectorDataset (magic DFMV, dims header, f64 LE rows)."""
    with open(path, "wb") as fh:
        fh.write(_DFMV_MAGIC)
        fh.write(struct.pack("<III", len(ds), ds.dim, len(ds.label_names)))
        for name in ds.label_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        for i in range(len(ds)):
            fh.write(struct.pack("<I", int(ds.labels[i])))
            fh.write(ds.features[i].astype("<f8").tobytes())


def load_vectors(path) -> VectorDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _DFMV_MAGIC:
        raise UnsupportedFormat(f"{path}: not a DFMV file")
    pos = 4
    try:
        n, dim, n_names = struct.unpack_from("<III", data, pos)
        pos += 12
        names = []
        for _ in range(n_names):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            names.append(data[pos:pos + ln].decode("utf-8"))
            pos += ln
        features = np.empty((n, dim))
        labels = np.empty(n, dtype=np.int64)
        row_bytes = 8 * dim
        for i in range(n):
            (labels[i],) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + row_bytes > len(data):
                raise TruncatedPayload(f"{path}: row {i} incomplete")
            features[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos)
            pos += row_bytes
    except struct.error:
        raise TruncatedPayload(f"{path}: header incomplete")
    return VectorDataset(features, labels, names)
