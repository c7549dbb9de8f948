"""Raster containers and file IO for the anomaly-segmentation pipeline.

Three rasters flow through the pipeline: per-pixel class probabilities
(H x W x C), ground-truth label masks (H x W), and anomaly score maps
(H x W).  Probability and score rasters live in a small binary format
("RAST"): 8-byte magic ``RASTv001``, three little-endian u32 dimensions
H, W, C, then H*W*C little-endian float32 values, row-major with the
class axis fastest-varying.  Masks are binary (P5) PGM files, maxval
255.

Label conventions: class indices run dense from 0.  Pixels labeled
``OOD_LABEL`` (254) are out-of-distribution ground truth; pixels labeled
``IGNORE_LABEL`` (255) are excluded from every loss, metric, and
evaluation.  Loader arguments remap other file conventions onto these
canonical values.

All container types are immutable after construction (their arrays are
marked read-only) and safe to share across threads.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OOD_LABEL = 254
IGNORE_LABEL = 255

_MAGIC = b"RASTv001"
_HEADER_LEN = len(_MAGIC) + 12
# Refuse payloads above 2^28 values (1 GiB of f32) as corrupt headers.
_MAX_VALUES = 1 << 28

# Per-pixel probability sums within this tolerance of 1 are accepted.
PROB_SUM_TOL = 1e-5
# Deviations at or below this level are float32 quantization noise of an
# already-normalized vector; renormalizing them would break bit-exact
# round-trips, so they pass through untouched.
_PROB_SUM_EXACT = 1e-7


class RasterFormatError(ValueError):
    """A raster file violates the RAST or PGM format contract."""


def _freeze(obj, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """H x W x C per-pixel class probabilities, each pixel summing to 1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"probability map must be 3-d, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1 or c < 2:
            raise ValueError(f"invalid probability map shape {arr.shape}")
        if not np.isfinite(arr).all():
            r, col, k = np.argwhere(~np.isfinite(arr))[0]
            raise ValueError(f"non-finite value at ({r}, {col}, {k})")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        dev = np.abs(arr.sum(axis=2) - 1.0)
        if dev.max() > PROB_SUM_TOL:
            r, col = np.unravel_index(int(dev.argmax()), dev.shape)
            raise ValueError(
                f"pixel ({r}, {col}) probabilities sum to {arr[r, col].sum():.8f}"
            )
        _freeze(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMask:
    """H x W ground-truth labels: class indices plus OOD/IGNORE markers."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"label mask must be 2-d and nonempty, got {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError("labels must be integers")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("labels must fit in a byte")
            arr = arr.astype(np.uint8)
        _freeze(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def is_ood(self) -> np.ndarray:
        return self.labels == OOD_LABEL

    def is_ignore(self) -> np.ndarray:
        return self.labels == IGNORE_LABEL

    def is_class(self) -> np.ndarray:
        return (self.labels != OOD_LABEL) & (self.labels != IGNORE_LABEL)


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """H x W anomaly scores in [0, 1]; higher means more anomalous."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"score map must be 2-d and nonempty, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("score map contains non-finite values")
        # Tolerate (and clamp) rounding excursions up to 1e-12 outside [0, 1].
        if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
            raise ValueError("scores must lie in [0, 1]")
        arr = np.clip(arr, 0.0, 1.0)
        _freeze(self, "scores", arr)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True, eq=False)
class Sample:
    """A probability map paired with its ground-truth mask."""

    id: str
    pmap: ProbabilityMap
    mask: LabelMask

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("sample id must be nonempty")
        if (self.pmap.height, self.pmap.width) != (self.mask.height, self.mask.width):
            raise ValueError(
                f"sample {self.id!r}: probability map is "
                f"{self.pmap.height}x{self.pmap.width} but mask is "
                f"{self.mask.height}x{self.mask.width}"
            )


@dataclass(frozen=True, eq=False)
class SampleSet:
    """An ordered collection of samples with unique identifiers."""

    samples: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample identifiers must be unique")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> tuple:
        return tuple(s.id for s in self.samples)


# ---------------------------------------------------------------------------
# RAST binary format
# ---------------------------------------------------------------------------


def _rast_bytes(arr: np.ndarray) -> bytes:
    h, w, c = arr.shape
    header = _MAGIC + struct.pack("<III", h, w, c)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _parse_rast(data: bytes, source: str) -> np.ndarray:
    if len(data) < _HEADER_LEN:
        raise RasterFormatError(f"{source}: truncated header")
    if data[:8] != _MAGIC:
        raise RasterFormatError(f"{source}: bad magic {data[:8]!r}")
    h, w, c = struct.unpack("<III", data[8:_HEADER_LEN])
    if h == 0 or w == 0 or c == 0 or h * w * c > _MAX_VALUES:
        raise RasterFormatError(f"{source}: dimension overflow ({h}x{w}x{c})")
    expected = _HEADER_LEN + 4 * h * w * c
    if len(data) != expected:
        raise RasterFormatError(
            f"{source}: payload is {len(data)} bytes, expected {expected}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER_LEN)
    return flat.reshape(h, w, c).astype(np.float64)


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file via a temp sibling and rename, so readers never see
    a partial file."""
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def load_probability_map(path) -> ProbabilityMap:
    """Load and validate a RAST probability map.

    Pixels whose probability sum drifts from 1 by at most ``PROB_SUM_TOL``
    are renormalized; larger deviations are rejected.  Sums already exact
    to float32 quantization noise are left untouched so that an unmodified
    save reproduces the input bit-for-bit.
    """
    arr = _parse_rast(_read_file(path), str(path))
    if not np.isfinite(arr).all():
        r, c, k = np.argwhere(~np.isfinite(arr))[0]
        raise RasterFormatError(f"{path}: non-finite value at ({r}, {c}, {k})")
    if arr.shape[2] < 2:
        raise RasterFormatError(f"{path}: probability map needs >= 2 classes")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RasterFormatError(f"{path}: probabilities outside [0, 1]")
    sums = arr.sum(axis=2)
    dev = np.abs(sums - 1.0)
    if dev.max() > PROB_SUM_TOL:
        r, c = np.unravel_index(int(dev.argmax()), dev.shape)
        raise RasterFormatError(
            f"{path}: pixel ({r}, {c}) probabilities sum to {sums[r, c]:.8f}"
        )
    renorm = dev > _PROB_SUM_EXACT
    if renorm.any():
        arr = arr.copy()
        arr[renorm] /= sums[renorm][:, None]
    return ProbabilityMap(arr)


def save_probability_map(pmap: ProbabilityMap, path) -> None:
    atomic_write_bytes(path, _rast_bytes(pmap.values))


def load_score_map(path) -> ScoreMap:
    arr = _parse_rast(_read_file(path), str(path))
    if arr.shape[2] != 1:
        raise RasterFormatError(f"{path}: score map must have C=1, got {arr.shape[2]}")
    return ScoreMap(arr[:, :, 0])


def save_score_map(smap: ScoreMap, path) -> None:
    atomic_write_bytes(path, _rast_bytes(smap.scores[:, :, None]))


# ---------------------------------------------------------------------------
# PGM masks
# ---------------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int, source: str) -> tuple:
    """Read `count` whitespace-separated header tokens, honoring # comments.

    Returns (tokens, offset of the byte after the single whitespace that
    terminates the last token).
    """
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise RasterFormatError(f"{source}: truncated PGM header")
        tokens.append(data[start:i])
    if i >= n:
        raise RasterFormatError(f"{source}: truncated PGM header")
    return tokens, i + 1


def _read_pgm(path) -> np.ndarray:
    data = _read_file(path)
    tokens, offset = _pgm_tokens(data, 4, str(path))
    if tokens[0] != b"P5":
        raise RasterFormatError(f"{path}: expected binary PGM (P5), got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: malformed PGM header") from exc
    if w < 1 or h < 1:
        raise RasterFormatError(f"{path}: invalid PGM dimensions {w}x{h}")
    if not 0 < maxval <= 255:
        raise RasterFormatError(f"{path}: PGM maxval {maxval} unsupported (need <=255)")
    if len(data) - offset != w * h:
        raise RasterFormatError(
            f"{path}: PGM payload is {len(data) - offset} bytes, expected {w * h}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(h, w)


def load_mask(
    path,
    ood_label: int = OOD_LABEL,
    ignore_label: int = IGNORE_LABEL,
    num_classes: int | None = None,
) -> LabelMask:
    """Load a PGM mask, remapping `ood_label`/`ignore_label` pixel values
    onto the canonical OOD_LABEL/IGNORE_LABEL markers.

    When `num_classes` is given, any other pixel value >= num_classes is
    rejected as an unknown label.
    """
    if ood_label == ignore_label:
        raise ValueError("ood_label and ignore_label must differ")
    raw = _read_pgm(path)
    ood_sel = raw == ood_label
    ign_sel = raw == ignore_label
    if num_classes is not None:
        if num_classes < 1 or num_classes > 254:
            raise ValueError(f"num_classes {num_classes} out of range")
        if ood_label < num_classes or ignore_label < num_classes:
            raise ValueError("ood/ignore labels collide with the class range")
        bad = ~ood_sel & ~ign_sel & (raw >= num_classes)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise RasterFormatError(f"{path}: unknown label {raw[r, c]} at ({r}, {c})")
    labels = raw.copy()
    labels[ood_sel] = OOD_LABEL
    labels[ign_sel] = IGNORE_LABEL
    return LabelMask(labels)


def save_mask(mask: LabelMask, path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + mask.labels.tobytes())


# ---------------------------------------------------------------------------
# Sample directories (<id>.rast + <id>.pgm pairs)
# ---------------------------------------------------------------------------


def save_samples(samples: SampleSet, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_probability_map(s.pmap, out / f"{s.id}.rast")
        save_mask(s.mask, out / f"{s.id}.pgm")


def load_samples(
    in_dir,
    ood_label: int = OOD_LABEL,
    ignore_label: int = IGNORE_LABEL,
) -> SampleSet:
    """Load every `<id>.rast` + `<id>.pgm` pair under a directory.

    Entries are ordered by id; `.score.rast` files are ignored.
    """
    root = Path(in_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    out = []
    for rast in sorted(root.glob("*.rast")):
        if rast.name.endswith(".score.rast"):
            continue
        pgm = rast.with_suffix(".pgm")
        if not pgm.exists():
            raise RasterFormatError(f"{rast}: no matching mask {pgm.name}")
        pmap = load_probability_map(rast)
        mask = load_mask(
            pgm, ood_label=ood_label, ignore_label=ignore_label,
            num_classes=pmap.num_classes,
        )
        out.append(Sample(rast.stem, pmap, mask))
    if not out:
        raise RasterFormatError(f"{root}: no sample pairs found")
    return SampleSet(tuple(out))
