"""Point-prediction and uncertainty-quality metrics.

The scalar functions (``mse``, ``ence``, ``mpiw``) pool every selected
entry; ``spearman_rho`` works on flat vectors.  :func:`evaluate` produces
the table-level report, computing rank correlation per cell over test
samples and averaging across cells.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .conformal import PredictionInterval, floor_sigma


def _select(a, mask):
    a = np.asarray(a, dtype=np.float64)
    if mask is None:
        out = a.ravel()
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        out = a[m]
    if out.size == 0:
        raise ValueError("metric selection is empty")
    return out


def mse(pred, truth, mask=None) -> float:
    return float(np.mean(_select((np.asarray(pred, float) - np.asarray(truth, float)) ** 2, mask)))


def ence(sigma, pred, truth, mask=None) -> float:
    """Mean of ``|sigma - |residual|| / sigma`` with sigma floored."""
    s = floor_sigma(sigma)
    r = np.abs(np.asarray(pred, float) - np.asarray(truth, float))
    return float(np.mean(_select(np.abs(s - r) / s, mask)))


def spearman_rho(errors, sigmas) -> float:
    """Rank correlation with average ranks for ties; NaN when either side has no rank spread."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    u = np.asarray(sigmas, dtype=np.float64).ravel()
    if e.size != u.size or e.size < 2:
        raise ValueError("need two equal-length vectors of at least 2 values")
    re, ru = rankdata(e), rankdata(u)
    re -= re.mean()
    ru -= ru.mean()
    denom = np.sqrt((re @ re) * (ru @ ru))
    if denom == 0:
        return float("nan")
    return float(np.clip((re @ ru) / denom, -1.0, 1.0))


def spearman_per_cell(errors, sigmas, mask=None) -> np.ndarray:
    """Rank correlation over the leading (test-sample) axis for each cell.

    Cells outside ``mask`` or without rank spread come back as NaN.
    """
    e = np.asarray(errors, dtype=np.float64)
    u = np.asarray(sigmas, dtype=np.float64)
    t = len(e)
    re = rankdata(e.reshape(t, -1), axis=0)
    ru = rankdata(u.reshape(t, -1), axis=0)
    re -= re.mean(axis=0)
    ru -= ru.mean(axis=0)
    num = (re * ru).sum(axis=0)
    denom = np.sqrt((re**2).sum(axis=0) * (ru**2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), np.nan)
    rho = np.clip(rho, -1.0, 1.0).reshape(e.shape[1:])
    if mask is not None:
        rho = np.where(mask, rho, np.nan)
    return rho


def mpiw(interval: PredictionInterval, mask=None) -> float:
    return float(np.mean(_select(interval.width, mask)))


@dataclass
class MetricReport:
    dataset: str
    method: str
    masked: bool
    mse: float
    mean_sigma: float
    sigma_spread: float
    mpiw: float
    ence: float
    spearman: float
    n_cells: int

    def row(self) -> dict:
        return asdict(self)


CSV_COLUMNS = [f.name for f in fields(MetricReport) if f.name != "n_cells"] + ["n_cells"]


def evaluate(mu, sigma, truth, interval: PredictionInterval, mask=None,
             dataset: str = "synthetic", method: str = "") -> MetricReport:
    """Table-level report over a test stack of shape (T, h, w, c).

    ``mask`` is a per-cell (h, w, c) selection applied to every test sample.
    The uncertainty spread is the std over test samples of the per-sample
    mean sigma, so a constant baseline reports zero spread.
    """
    mu, sigma, truth = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, truth))
    cell_mask = None if mask is None else np.asarray(mask, dtype=bool)
    full = None if cell_mask is None else np.broadcast_to(cell_mask, mu.shape)
    sel = (lambda a: a.reshape(len(a), -1)) if cell_mask is None else (lambda a: a[:, cell_mask])
    flat = sel(sigma)
    # offsets from the first sample keep identical rows exactly equal after averaging
    per_sample_sigma = flat[0].mean() + (flat - flat[:1]).mean(axis=1)
    rho = spearman_per_cell(np.abs(mu - truth), sigma, cell_mask)
    return MetricReport(
        dataset=dataset,
        method=method,
        masked=cell_mask is not None,
        mse=mse(mu, truth, full),
        mean_sigma=float(per_sample_sigma.mean()),
        sigma_spread=float(per_sample_sigma.std()),
        mpiw=mpiw(interval, full),
        ence=ence(sigma, mu, truth, full),
        spearman=float(np.nanmean(rho)) if np.any(np.isfinite(rho)) else float("nan"),
        n_cells=int(sel(mu).shape[1]),
    )


def write_reports(reports, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            row = r.row()
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
