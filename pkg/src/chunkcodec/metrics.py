"""Reconstruction-quality metrics and codebook health reporting.

All metrics are pure reporting functions: they never mutate their inputs.
Signals are compared in the normalized [-1, 1] command space, so the PSNR
peak defaults to 2.0 (the full data range); the peak used is recorded in
the report for auditability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import COMMAND_NAMES, NUM_COMMAND_DIMS

__all__ = [
    "mae",
    "psnr",
    "uqi",
    "aki",
    "codebook_perplexity",
    "ReconstructionReport",
    "PSNR_CAP_DB",
    "DEFAULT_PEAK",
]

PSNR_CAP_DB = 200.0
DEFAULT_PEAK = 2.0
_VAR_FLOOR = 1e-12


def _check_same_shape(name: str, x: np.ndarray, y: np.ndarray):
    if x.shape != y.shape:
        raise ValueError(f"{name}: shape {x.shape} vs {y.shape}")


def mae(x, x_hat) -> float:
    """Mean absolute error over all entries."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    _check_same_shape("mae", x, x_hat)
    return float(np.abs(x - x_hat).mean())


def psnr(x, x_hat, peak: float = DEFAULT_PEAK) -> float:
    """Peak signal-to-noise ratio in dB; identical signals report the
    200 dB cap instead of infinity."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    _check_same_shape("psnr", x, x_hat)
    if peak <= 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.square(x - x_hat).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def uqi(x, x_hat) -> float:
    """Universal quality index over the flattened signals.

    Q = 4*cov*mean_x*mean_y / ((var_x + var_y) * (mean_x^2 + mean_y^2)).
    Identical inputs score 1.0 even when a denominator degenerates; a
    degenerate denominator with unequal inputs scores 0.0 with a warning.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(x_hat, dtype=np.float64).ravel()
    _check_same_shape("uqi", x, y)
    if x.size < 2:
        raise ValueError("uqi: need at least 2 elements")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    denom = (vx + vy) * (mx * mx + my * my)
    if denom == 0.0:
        if np.array_equal(x, y):
            return 1.0
        warnings.warn("uqi: degenerate denominator with unequal inputs, reporting 0", stacklevel=2)
        return 0.0
    return float(4.0 * cov * mx * my / denom)


def _excess_kurtosis(series: np.ndarray) -> float:
    centered = series - series.mean()
    var = np.square(centered).mean()
    if var < _VAR_FLOOR:
        return 0.0
    return float(np.power(centered, 4).mean() / (var * var) - 3.0)


def aki(x, x_hat) -> float:
    """Kurtosis index of the reconstruction error.

    Mean over the 12 command dimensions of |excess kurtosis| of the error
    along time (batch axes are folded into time). Near-constant error
    (variance < 1e-12) counts as 0; fewer than 4 time samples is an error.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    _check_same_shape("aki", x, x_hat)
    if x.shape[-1] != NUM_COMMAND_DIMS:
        raise ValueError(f"aki: trailing axis must be {NUM_COMMAND_DIMS} dims, got {x.shape[-1]}")
    err = (x - x_hat).reshape(-1, NUM_COMMAND_DIMS)
    if err.shape[0] < 4:
        raise ValueError(f"aki: need at least 4 time samples, got {err.shape[0]}")
    return float(np.mean([abs(_excess_kurtosis(err[:, d])) for d in range(NUM_COMMAND_DIMS)]))


def codebook_perplexity(histogram) -> float:
    """exp(entropy) of a code-usage histogram; K when usage is uniform,
    1 when a single code carries everything."""
    h = np.asarray(histogram, dtype=np.float64)
    total = h.sum()
    if h.size == 0 or total <= 0:
        raise ValueError("codebook_perplexity: histogram is empty")
    p = h / total
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


@dataclass
class ReconstructionReport:
    """One evaluation row: the four fidelity metrics plus codebook health."""

    mae: float
    aki: float
    psnr_db: float
    uqi: float
    peak: float = DEFAULT_PEAK
    per_dim_mae: np.ndarray = field(default_factory=lambda: np.zeros(NUM_COMMAND_DIMS))
    perplexity: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.per_dim_mae = np.asarray(self.per_dim_mae, dtype=np.float64)
        if not -1.0 - 1e-9 <= self.uqi <= 1.0 + 1e-9:
            raise ValueError(f"uqi out of [-1, 1]: {self.uqi}")
        if self.mae < 0:
            raise ValueError(f"negative mae: {self.mae}")
        for p in self.perplexity:
            if p < 1.0 - 1e-9:
                raise ValueError(f"perplexity below 1: {p}")

    @classmethod
    def compute(cls, x, x_hat, peak: float = DEFAULT_PEAK,
                usage_histograms=None) -> "ReconstructionReport":
        x = np.asarray(x, dtype=np.float64)
        x_hat = np.asarray(x_hat, dtype=np.float64)
        err = np.abs(x - x_hat).reshape(-1, NUM_COMMAND_DIMS)
        perp = []
        if usage_histograms is not None:
            perp = [codebook_perplexity(h) for h in usage_histograms]
        return cls(
            mae=mae(x, x_hat),
            aki=aki(x, x_hat),
            psnr_db=psnr(x, x_hat, peak),
            uqi=uqi(x, x_hat),
            peak=peak,
            per_dim_mae=err.mean(axis=0),
            perplexity=perp,
        )

    def to_text(self) -> str:
        lines = [
            f"mae={self.mae!r}",
            f"aki={self.aki!r}",
            f"psnr_db={self.psnr_db!r}",
            f"uqi={self.uqi!r}",
            f"peak={self.peak!r}",
        ]
        lines += [
            f"mae.{name}={value!r}"
            for name, value in zip(COMMAND_NAMES, self.per_dim_mae)
        ]
        lines += [f"perplexity.layer{i}={p!r}" for i, p in enumerate(self.perplexity)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_header(num_layers: int = 0) -> str:
        cols = ["mae", "aki", "psnr_db", "uqi", "peak"]
        cols += [f"mae_{name}" for name in COMMAND_NAMES]
        cols += [f"perplexity_layer{i}" for i in range(num_layers)]
        return ",".join(cols)

    def to_csv_row(self) -> str:
        vals = [self.mae, self.aki, self.psnr_db, self.uqi, self.peak]
        vals += list(self.per_dim_mae)
        vals += list(self.perplexity)
        return ",".join(repr(v) for v in vals)
