"""Hand-crafted component metrics and the labeled metrics dataset.

Every predicted-OoD component is summarized by a fixed-order metric
vector combining four families:

* Dispersion (24): for each per-pixel uncertainty field (normalized
  entropy read from the score map, variation ratio, probability margin):
  mean over all/interior/boundary pixels, population variance over
  all/interior/boundary, boundary-to-interior mean ratio (denominator
  guarded by +1e-9), and boundary-minus-interior mean difference.
* Geometry (8): size S, interior size, boundary size, boundary fraction,
  sqrt(S), normalized centroid row/col, bounding-box fill ratio.
* Class probabilities (2C): per class, mean and population variance of
  that class's probability over the component pixels.
* Neighborhood (5): over the one-pixel 8-neighbor dilation ring just
  outside the component (clipped to the image): mean normalized entropy,
  mean max-probability, fraction of ring pixels at or above the score
  threshold, ring-size-to-boundary-size ratio, mean probability margin.
  An empty ring (component covers the whole image) yields five zeros.

That totals 24 + 8 + 2C + 5 metrics, 75 at C = 19.  Interior statistics
of a component with no interior fall back to whole-component statistics,
which keeps single-pixel components finite.  Population (not sample)
variance is used throughout for the same reason.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import LabelMask, ProbabilityMap, SampleSet, ScoreMap, atomic_write_text
from .scoring import anomaly_score_map, margin_map, variation_ratio_map
from .segments import (
    ComponentRecord,
    ThresholdConfig,
    extract_labeled_components,
)

_DISPERSION_FIELDS = ("ent", "vr", "margin")
_DISPERSION_STATS = (
    "mean", "mean_in", "mean_bd", "var", "var_in", "var_bd",
    "bd_in_ratio", "bd_in_diff",
)
_GEOMETRY_NAMES = (
    "size", "size_in", "size_bd", "size_bd_frac", "size_sqrt",
    "center_row", "center_col", "bbox_fill",
)
_NEIGHBOR_NAMES = (
    "nb_ent_mean", "nb_maxprob_mean", "nb_hot_frac",
    "nb_ring_bd_ratio", "nb_margin_mean",
)
_RATIO_GUARD = 1e-9


@dataclass(frozen=True)
class MetricRegistry:
    """Fixed, ordered metric layout.

    `standard(C)` builds the full four-family layout described above;
    `custom(names)` wraps an arbitrary name list for small hand-built
    datasets (toy training sets, metric subsets).  Only standard
    registries can drive metric extraction from rasters.
    """

    names: tuple
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("registry needs at least one metric")
        if len(set(self.names)) != len(self.names):
            raise ValueError("metric names must be unique")
        if self.num_classes:
            expected = 24 + 8 + 2 * self.num_classes + 5
            if len(self.names) != expected:
                raise ValueError(
                    f"standard registry at C={self.num_classes} needs "
                    f"{expected} metrics, got {len(self.names)}"
                )

    @property
    def total(self) -> int:
        return len(self.names)

    @classmethod
    def standard(cls, num_classes: int) -> "MetricRegistry":
        if num_classes < 2:
            raise ValueError("standard registry needs num_classes >= 2")
        names = [
            f"{field}_{stat}"
            for field in _DISPERSION_FIELDS
            for stat in _DISPERSION_STATS
        ]
        names.extend(_GEOMETRY_NAMES)
        for c in range(num_classes):
            names.extend((f"cls{c}_mean", f"cls{c}_var"))
        names.extend(_NEIGHBOR_NAMES)
        return cls(names=tuple(names), num_classes=num_classes)

    @classmethod
    def custom(cls, names) -> "MetricRegistry":
        return cls(names=tuple(names), num_classes=0)


@dataclass(frozen=True, eq=False)
class MetricsDataset:
    """Component metric rows with ground-truth labels and provenance."""

    rows: np.ndarray
    labels: np.ndarray
    group_ids: tuple
    registry: MetricRegistry

    def __post_init__(self) -> None:
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        if rows.size == 0:
            rows = rows.reshape(0, self.registry.total)
        if rows.ndim != 2 or rows.shape[1] != self.registry.total:
            raise ValueError(
                f"rows must be n x {self.registry.total}, got {rows.shape}"
            )
        if not np.isfinite(rows).all():
            raise ValueError("metric rows must be finite")
        if labels.shape[0] != rows.shape[0] or len(self.group_ids) != rows.shape[0]:
            raise ValueError("rows, labels, and group_ids must have equal length")
        rows.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "group_ids", tuple(str(g) for g in self.group_ids))

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def num_metrics(self) -> int:
        return self.registry.total

    def subset(self, indices) -> "MetricsDataset":
        """Row subset in the given index order."""
        idx = np.asarray(indices, dtype=np.intp).reshape(-1)
        return MetricsDataset(
            rows=self.rows[idx],
            labels=self.labels[idx],
            group_ids=tuple(self.group_ids[i] for i in idx),
            registry=self.registry,
        )

    def split_by_group(self, held_out: str):
        """Indices of rows outside/inside one group."""
        out = [i for i, g in enumerate(self.group_ids) if g != held_out]
        held = [i for i, g in enumerate(self.group_ids) if g == held_out]
        return out, held

    def select_metrics(self, metric_indices) -> "MetricsDataset":
        """Column subset, keeping the given metric order, as a custom
        registry."""
        idx = np.asarray(metric_indices, dtype=np.intp).reshape(-1)
        names = tuple(self.registry.names[i] for i in idx)
        return MetricsDataset(
            rows=self.rows[:, idx],
            labels=self.labels,
            group_ids=self.group_ids,
            registry=MetricRegistry.custom(names),
        )


@dataclass(frozen=True)
class StandardizationStats:
    """Per-column mean/sigma for z-scoring; reusable on held-out rows."""

    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mean.shape != sigma.shape:
            raise ValueError("mean and sigma must have equal length")
        if not (np.isfinite(mean).all() and np.isfinite(sigma).all()):
            raise ValueError("statistics must be finite")
        if (sigma <= 0).any():
            raise ValueError("sigma must be positive")
        mean.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.mean.shape[0]:
            raise ValueError(
                f"rows have {rows.shape[-1]} columns, stats have {self.mean.shape[0]}"
            )
        return (rows - self.mean) / self.sigma


def standardize(dataset: MetricsDataset):
    """Z-score each column by its mean and population standard deviation.

    Zero-variance columns pass through unchanged: their recorded mean is
    0 and sigma is 1, so applying the statistics elsewhere also leaves
    such columns alone.  Returns (standardized dataset, statistics).
    """
    if len(dataset) < 2:
        raise ValueError("standardization needs at least 2 rows")
    mean = dataset.rows.mean(axis=0)
    sigma = dataset.rows.std(axis=0)
    flat = sigma == 0.0
    mean = np.where(flat, 0.0, mean)
    sigma = np.where(flat, 1.0, sigma)
    stats = StandardizationStats(mean=mean, sigma=sigma)
    out = MetricsDataset(
        rows=stats.apply(dataset.rows),
        labels=dataset.labels,
        group_ids=dataset.group_ids,
        registry=dataset.registry,
    )
    return out, stats


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _sample_fields(pmap: ProbabilityMap, score: ScoreMap, threshold: float) -> dict:
    if (pmap.height, pmap.width) != (score.height, score.width):
        raise ValueError("probability map and score map dims differ")
    return {
        "ent": score.scores,
        "vr": variation_ratio_map(pmap),
        "margin": margin_map(pmap),
        "maxprob": pmap.values.max(axis=-1),
        "probs": pmap.values,
        "dims": (pmap.height, pmap.width),
        "threshold": float(threshold),
    }


def _dispersion_stats(field: np.ndarray, all_ix, in_ix, bd_ix) -> list:
    vals = field[all_ix]
    mean_all = float(vals.mean())
    var_all = float(vals.var())
    if in_ix[0].size:
        iv = field[in_ix]
        mean_in, var_in = float(iv.mean()), float(iv.var())
    else:
        mean_in, var_in = mean_all, var_all
    bv = field[bd_ix]
    mean_bd, var_bd = float(bv.mean()), float(bv.var())
    return [
        mean_all, mean_in, mean_bd, var_all, var_in, var_bd,
        mean_bd / (mean_in + _RATIO_GUARD), mean_bd - mean_in,
    ]


def _index_pair(pixels):
    pts = sorted(pixels)
    rows = np.array([p[0] for p in pts], dtype=np.intp)
    cols = np.array([p[1] for p in pts], dtype=np.intp)
    return rows, cols


def _component_row(comp: ComponentRecord, fields: dict) -> np.ndarray:
    h, w = fields["dims"]
    rmin, rmax, cmin, cmax = comp.bbox
    if rmin < 0 or cmin < 0 or rmax >= h or cmax >= w:
        raise ValueError(f"component bbox {comp.bbox} outside {h}x{w} image")

    all_ix = _index_pair(comp.pixels)
    bd_ix = _index_pair(comp.boundary)
    in_ix = _index_pair(comp.interior)

    out = []
    for name in _DISPERSION_FIELDS:
        out.extend(_dispersion_stats(fields[name], all_ix, in_ix, bd_ix))

    s = float(comp.size)
    s_in = float(len(comp.interior))
    s_bd = float(len(comp.boundary))
    out.extend([
        s, s_in, s_bd, s_bd / s, float(np.sqrt(s)),
        float(all_ix[0].mean()) / h, float(all_ix[1].mean()) / w,
        s / ((rmax - rmin + 1) * (cmax - cmin + 1)),
    ])

    cprobs = fields["probs"][all_ix]
    for c in range(cprobs.shape[1]):
        out.extend([float(cprobs[:, c].mean()), float(cprobs[:, c].var())])

    grid = np.zeros((h, w), dtype=bool)
    grid[all_ix] = True
    pad = np.pad(grid, 1, constant_values=False)
    dilated = np.zeros_like(pad)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            dilated |= np.roll(np.roll(pad, dr, axis=0), dc, axis=1)
    ring = dilated[1:-1, 1:-1] & ~grid
    ring_ix = np.nonzero(ring)
    if ring_ix[0].size:
        ent_ring = fields["ent"][ring_ix]
        out.extend([
            float(ent_ring.mean()),
            float(fields["maxprob"][ring_ix].mean()),
            float(np.mean(ent_ring >= fields["threshold"])),
            ring_ix[0].size / s_bd,
            float(fields["margin"][ring_ix].mean()),
        ])
    else:
        out.extend([0.0, 0.0, 0.0, 0.0, 0.0])

    row = np.array(out, dtype=np.float64)
    if not np.isfinite(row).all():
        raise ValueError("metric row contains non-finite values")
    return row


def extract_metrics(
    comp: ComponentRecord,
    pmap: ProbabilityMap,
    score: ScoreMap,
    registry: MetricRegistry,
    threshold: float = 0.7,
) -> np.ndarray:
    """Metric vector for one component, laid out per the registry.

    `threshold` is the score threshold the neighborhood hot-fraction
    metric compares against; pass the same t used to build the
    components.
    """
    if registry.num_classes != pmap.num_classes:
        raise ValueError(
            f"registry is for C={registry.num_classes}, "
            f"probability map has C={pmap.num_classes}"
        )
    return _component_row(comp, _sample_fields(pmap, score, threshold))


def build_metrics_dataset(
    samples: SampleSet,
    cfg: ThresholdConfig,
    registry: MetricRegistry,
    min_size: int = 1,
) -> MetricsDataset:
    """Score, threshold, segment, and label every sample, emitting one
    metric row per component.

    Rows follow the sample order of the set, then component id within a
    sample.
    """
    rows, labels, groups = [], [], []
    for sample in samples:
        if registry.num_classes != sample.pmap.num_classes:
            raise ValueError(
                f"sample {sample.id!r} has C={sample.pmap.num_classes}, "
                f"registry expects C={registry.num_classes}"
            )
        score = anomaly_score_map(sample.pmap)
        comps = extract_labeled_components(
            score, sample.mask, cfg, min_size=min_size, source_sample=sample.id
        )
        fields = _sample_fields(sample.pmap, score, cfg.t)
        for comp in comps:
            rows.append(_component_row(comp, fields))
            labels.append(bool(comp.is_false_positive))
            groups.append(sample.id)
    return MetricsDataset(
        rows=np.array(rows, dtype=np.float64).reshape(len(rows), registry.total),
        labels=np.array(labels, dtype=bool),
        group_ids=tuple(groups),
        registry=registry,
    )


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------


def _format_float(x: float) -> str:
    return f"{x:.9g}"


def save_metrics_csv(dataset: MetricsDataset, path) -> None:
    """Write the dataset as CSV: metric columns, then label, then
    group_id; floats at 9 significant digits."""
    lines = []

    class _Sink:
        def write(self, text):
            lines.append(text)

    writer = csv.writer(_Sink(), lineterminator="\n")
    writer.writerow(list(dataset.registry.names) + ["label", "group_id"])
    for row, label, group in zip(dataset.rows, dataset.labels, dataset.group_ids):
        writer.writerow(
            [_format_float(v) for v in row] + [str(int(label)), group]
        )
    atomic_write_text(path, "".join(lines))


def load_metrics_csv(path) -> MetricsDataset:
    """Read a dataset written by `save_metrics_csv`.

    The registry is reconstructed from the header: the standard layout
    when the names match one, otherwise a custom registry.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        if len(header) < 3 or header[-2:] != ["label", "group_id"]:
            raise ValueError(f"{path}: expected trailing label,group_id columns")
        names = header[:-2]
        registry = MetricRegistry.custom(names)
        n = len(names)
        if (n - 37) % 2 == 0 and n >= 41:
            c = (n - 37) // 2
            std = MetricRegistry.standard(c)
            if std.names == tuple(names):
                registry = std
        rows, labels, groups = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n + 2:
                raise ValueError(f"{path}:{lineno}: expected {n + 2} fields")
            rows.append([float(v) for v in rec[:n]])
            labels.append(bool(int(rec[n])))
            groups.append(rec[n + 1])
    return MetricsDataset(
        rows=np.array(rows, dtype=np.float64).reshape(len(rows), n),
        labels=np.array(labels, dtype=bool),
        group_ids=tuple(groups),
        registry=registry,
    )
