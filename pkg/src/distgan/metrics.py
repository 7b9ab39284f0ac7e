"""Per-epoch records and the mode-coverage measure."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import NumericError

GENERATOR_ID = -1

METRICS_COLUMNS = ("epoch", "user_id", "d_loss", "g_loss", "work_units", "wall_ms")
COVERAGE_COLUMNS = ("epoch", "covered_modes", "quality")


@dataclass(frozen=True)
class MetricsRecord:
    """One row of metrics.csv.

    User rows carry ``d_loss`` and the number of real samples processed.
    The generator row (``user_id == GENERATOR_ID``) carries ``g_loss`` and the
    number of generator steps taken in ``work_units``.
    """

    epoch: int
    user_id: int
    d_loss: float | None
    g_loss: float | None
    work_units: int
    wall_ms: float

    def __post_init__(self):
        for v in (self.d_loss, self.g_loss):
            if v is not None and not math.isfinite(v):
                raise NumericError(f"non-finite loss in metrics record: {self}")

    def csv_row(self, with_wall: bool) -> str:
        fmt = lambda v: "" if v is None else repr(float(v))
        wall = f"{self.wall_ms:.3f}" if with_wall else "0"
        return f"{self.epoch},{self.user_id},{fmt(self.d_loss)},{fmt(self.g_loss)},{self.work_units},{wall}"


@dataclass(frozen=True)
class CoverageReport:
    counts: np.ndarray  # samples assigned (nearest center) per mode
    within: np.ndarray  # of those, samples within 3 sigma
    covered_modes: int
    high_quality_fraction: float

    @property
    def total_modes(self) -> int:
        return int(self.counts.size)


def mode_coverage(samples, centers, sigma: float, threshold_count: int) -> CoverageReport:
    """Assign each sample to its nearest center; a mode is covered when at
    least ``threshold_count`` samples sit within ``3 * sigma`` of it."""
    x = np.asarray(samples, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[0] == 0 or c.shape[0] == 0:
        raise ValueError("mode_coverage needs non-empty sample and center matrices")
    if x.shape[1] != c.shape[1]:
        raise ValueError(f"samples have {x.shape[1]} dims, centers {c.shape[1]}")
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    dist = np.sqrt(d2[np.arange(x.shape[0]), nearest])
    close = dist <= 3.0 * sigma
    counts = np.bincount(nearest, minlength=c.shape[0])
    within = np.bincount(nearest[close], minlength=c.shape[0])
    covered = int((within >= threshold_count).sum())
    return CoverageReport(counts, within, covered, float(close.mean()))
