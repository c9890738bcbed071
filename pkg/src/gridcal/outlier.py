"""Unsupervised outlier detection from epistemic uncertainty.

Per cell, a Gaussian KDE is fitted to training-time uncertainties; each test
uncertainty gets an upper-tail p-value under that density.  The four
directional p-values of a pixel are combined with Fisher's method, once for
the volume channels and once for the speed channels, and thresholded.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .tensor import DEFAULT_LAYOUT, ChannelLayout

BANDWIDTH_FLOOR = 1e-6
P_FLOOR = 1e-300


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(x.std(ddof=1), iqr / 1.34) if iqr > 0 else x.std(ddof=1)
    return max(0.9 * spread * len(x) ** (-0.2), BANDWIDTH_FLOOR)


@dataclass(frozen=True)
class CellDensity:
    samples: np.ndarray
    bandwidth: float

    def pdf(self, x):
        z = (np.asarray(x, dtype=np.float64)[..., None] - self.samples) / self.bandwidth
        return np.exp(-0.5 * z**2).sum(axis=-1) / (len(self.samples) * self.bandwidth * np.sqrt(2 * np.pi))

    def mean(self) -> float:
        return float(self.samples.mean())


def fit_kde(samples, bandwidth: float | None = None) -> CellDensity:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 samples for a density")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if bandwidth is None:
        if np.all(x == x[0]):
            warnings.warn("all samples identical; using the bandwidth floor", RuntimeWarning, stacklevel=2)
        bandwidth = silverman_bandwidth(x)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return CellDensity(x, float(bandwidth))


def tail_pvalue(density: CellDensity, sigma_star) -> np.ndarray | float:
    """Upper-tail mass of the KDE beyond ``sigma_star`` (closed form)."""
    s = np.asarray(sigma_star, dtype=np.float64)
    z = (s[..., None] - density.samples) / density.bandwidth
    p = special.ndtr(-z).mean(axis=-1)
    return float(p) if p.ndim == 0 else p


def fisher_aggregate(pvals, axis: int = -1) -> np.ndarray | float:
    """Fisher's combined p-value: P(chi2_{2k} >= -2 sum log p)."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim == 0:
        p = p[None]
    if p.shape[axis] < 1:
        raise ValueError("need at least one p-value")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if np.any(p < P_FLOOR):
        warnings.warn("p-values below 1e-300 floored before taking logs", RuntimeWarning, stacklevel=2)
        p = np.maximum(p, P_FLOOR)
    k = p.shape[axis]
    if k == 1:
        out = np.take(p, 0, axis=axis)  # Fisher with a single test is the identity
        return float(out) if np.ndim(out) == 0 else out
    x2 = -2.0 * np.log(p).sum(axis=axis)
    out = special.gammaincc(k, x2 / 2.0)  # chi2 survival with 2k dof
    return float(out) if np.ndim(out) == 0 else out


def cell_pvalues(train_sigmas, test_sigmas, chunk: int = 4096):
    """Tail p-values for every test uncertainty against its cell's training KDE.

    ``train_sigmas`` is (N, ...cells), ``test_sigmas`` is (T, ...cells).
    Returns ``(pvals (T, ...cells), bandwidths (...cells))``.
    """
    tr = np.asarray(train_sigmas, dtype=np.float64)
    te = np.asarray(test_sigmas, dtype=np.float64)
    if tr.shape[1:] != te.shape[1:]:
        raise ValueError(f"cell geometry differs: train {tr.shape[1:]}, test {te.shape[1:]}")
    n, t = len(tr), len(te)
    if n < 2:
        raise ValueError("need at least 2 training uncertainties per cell")
    tr2, te2 = tr.reshape(n, -1), te.reshape(t, -1)
    q75, q25 = np.percentile(tr2, [75, 25], axis=0)
    std = tr2.std(axis=0, ddof=1)
    iqr = (q75 - q25) / 1.34
    spread = np.where(iqr > 0, np.minimum(std, iqr), std)
    bw = np.maximum(0.9 * spread * n ** (-0.2), BANDWIDTH_FLOOR)
    pv = np.empty_like(te2)
    for k in range(0, tr2.shape[1], chunk):
        sl = slice(k, k + chunk)
        z = (te2[:, None, sl] - tr2[None, :, sl]) / bw[sl]
        pv[:, sl] = special.ndtr(-z).mean(axis=1)
    return pv.reshape(te.shape), bw.reshape(tr.shape[1:])


@dataclass
class OutlierReport:
    """Per-pixel results for one test sample."""

    index: int
    p_vol: np.ndarray
    p_speed: np.ndarray
    out_vol: np.ndarray
    out_speed: np.ndarray
    epsilon: float
    time_index: int | None = None
    skipped: np.ndarray | None = None

    @property
    def out_pixel(self) -> np.ndarray:
        return self.out_vol | self.out_speed


def detect_outliers(train_sigmas, test_sigmas, layout: ChannelLayout = DEFAULT_LAYOUT,
                    epsilon: float = 0.001, literal_direction: bool = False,
                    time_index: int | None = None) -> list[OutlierReport]:
    """Label test samples per pixel and channel group.

    ``train_sigmas`` is (N, h, w, c), ``test_sigmas`` is (T, h, w, c).  A
    group is flagged when its Fisher-combined p-value is <= ``epsilon``;
    ``literal_direction=True`` flags when it is >= ``epsilon`` instead.
    Pixels whose cells have fewer than 2 finite training values are skipped:
    never flagged and marked in ``skipped``.
    """
    tr = np.asarray(train_sigmas, dtype=np.float64)
    te = np.asarray(test_sigmas, dtype=np.float64)
    finite = np.isfinite(tr).sum(axis=0)
    skipped = (finite < 2).any(axis=-1)
    if len(tr) < 2:
        skipped = np.ones(te.shape[1:3], dtype=bool)
        pv = np.ones_like(te)
    else:
        pv, _ = cell_pvalues(np.where(np.isfinite(tr), tr, 0.0), te)
    vol = list(layout.volume_channel_indices)
    spd = list(layout.speed_channel_indices)
    p_vol = fisher_aggregate(np.clip(pv[..., vol], 0, 1), axis=-1)
    p_spd = fisher_aggregate(np.clip(pv[..., spd], 0, 1), axis=-1)
    if literal_direction:
        out_vol, out_spd = p_vol >= epsilon, p_spd >= epsilon
    else:
        out_vol, out_spd = p_vol <= epsilon, p_spd <= epsilon
    out_vol &= ~skipped
    out_spd &= ~skipped
    return [
        OutlierReport(t, p_vol[t], p_spd[t], out_vol[t], out_spd[t], epsilon, time_index, skipped)
        for t in range(len(te))
    ]


@dataclass
class OutlierShares:
    temporal_vol: np.ndarray
    temporal_speed: np.ndarray
    temporal_pixel: np.ndarray
    spatial_vol: np.ndarray
    spatial_speed: np.ndarray
    spatial_pixel: np.ndarray


def outlier_share(reports: list[OutlierReport]) -> OutlierShares:
    """Fraction of pixels flagged per sample, and of samples flagged per pixel."""
    if not reports:
        raise ValueError("no reports")
    vol = np.stack([r.out_vol for r in reports])
    spd = np.stack([r.out_speed for r in reports])
    pix = vol | spd
    return OutlierShares(
        vol.mean(axis=(1, 2)), spd.mean(axis=(1, 2)), pix.mean(axis=(1, 2)),
        vol.mean(axis=0), spd.mean(axis=0), pix.mean(axis=0),
    )


def write_outlier_csv(reports: list[OutlierReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "row", "col", "p_vol", "p_speed", "out_vol", "out_speed", "out_pixel", "skipped"])
        for r in reports:
            pix = r.out_pixel
            for i in range(r.p_vol.shape[0]):
                for j in range(r.p_vol.shape[1]):
                    w.writerow([r.index, i, j, f"{r.p_vol[i, j]:.10g}", f"{r.p_speed[i, j]:.10g}",
                                int(r.out_vol[i, j]), int(r.out_speed[i, j]), int(pix[i, j]),
                                int(r.skipped[i, j]) if r.skipped is not None else 0])
