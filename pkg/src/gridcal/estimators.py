"""Sampling-based uncertainty estimators.

Each estimator turns a predictor (or an ensemble) and one input window into
a per-cell point estimate ``mu`` and spread ``sigma``.  All Monte Carlo
spreads are population standard deviations (divide by M).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .io import write_kv, write_tensor
from .predictor import EnsembleModel, Predictor, UnsupportedCapabilityError, forward_stochastic_bn
from .tensor import ALL_TRANSFORMS, apply_transform, invert_transform, pad_to_square, unpad

KINDS = ("epistemic", "aleatoric", "predictive")


@dataclass(frozen=True)
class UQEstimate:
    mu: np.ndarray
    sigma: np.ndarray
    kind: str
    method: str
    m: int | np.ndarray = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if np.shape(self.mu) != np.shape(self.sigma):
            raise ValueError(f"mu {np.shape(self.mu)} and sigma {np.shape(self.sigma)} differ in shape")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be non-negative")

    def save(self, directory, extra: dict | None = None) -> None:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(np.asarray(self.mu, dtype=np.float32), d / "mu.grt")
        write_tensor(np.asarray(self.sigma, dtype=np.float32), d / "sigma.grt")
        m = self.m if np.isscalar(self.m) else "per-cell"
        write_kv(d / "meta.txt", {"method": self.method, "kind": self.kind, "M": m, **(extra or {})})


def _spread(samples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std over ``axis``.

    Deviations are taken from the first sample, so identical samples give
    a spread of exactly zero.
    """
    samples = np.asarray(samples, dtype=np.float64)
    ref = np.take(samples, [0], axis=axis)
    dev = samples - ref
    return np.squeeze(ref, axis) + dev.mean(axis=axis), dev.std(axis=axis)


def ensemble_estimate(ens: EnsembleModel, inputs) -> UQEstimate:
    if len(ens) < 1:
        raise ValueError("ensemble is empty")
    mu, sigma = _spread(ens.forward_all(inputs))
    return UQEstimate(mu, sigma, "epistemic", "ens", len(ens))


def mcbn_estimate(model: Predictor, inputs, train_inputs, m: int = 10, batch_size: int = 12,
                  rng: np.random.Generator | int | None = None) -> UQEstimate:
    """M stochastic-BN passes, each normalizing with a freshly drawn training mini-batch.

    ``train_inputs`` is an array ``(n, 12, h, w, c)`` or a sequence of input
    windows.  Each mini-batch is drawn without replacement; batches are
    independent across passes.
    """
    if not getattr(model, "has_batch_norm", False):
        raise UnsupportedCapabilityError(f"{type(model).__name__} has no batch-norm layers")
    rng = np.random.default_rng(rng)
    n = len(train_inputs)
    if n < batch_size:
        raise ValueError(f"need at least {batch_size} training windows, got {n}")
    passes = []
    for _ in range(m):
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        batch = np.stack([np.asarray(train_inputs[i]) for i in idx])
        passes.append(forward_stochastic_bn(model, inputs, batch))
    mu, sigma = _spread(np.stack(passes))
    return UQEstimate(mu, sigma, "epistemic", "mcbn", m)


def tta_predictions(model: Predictor, inputs) -> np.ndarray:
    """Aligned predictions for the identity and the seven augmentations.

    Inputs are zero-padded to a square grid, transformed, predicted,
    inverse-transformed and cropped back.  A single window gives
    (8, h, w, c); a batch (n, 12, h, w, c) gives (8, n, h, w, c).
    """
    x = np.asarray(inputs)
    h, w = x.shape[-3], x.shape[-2]
    xp = pad_to_square(x, max(h, w))
    batch = np.stack([apply_transform(xp, t) for t in ALL_TRANSFORMS])
    lead = batch.shape[:-4]
    preds = model.forward(batch.reshape((-1,) + batch.shape[-4:]))
    preds = preds.reshape(lead + preds.shape[-3:])
    return np.stack([unpad(invert_transform(p, t), h, w) for p, t in zip(preds, ALL_TRANSFORMS)])


def tta_estimate(model: Predictor, inputs) -> UQEstimate:
    """Aleatoric spread over the 8 dihedral views; ``mu`` is the unaugmented prediction."""
    preds = tta_predictions(model, inputs)
    return UQEstimate(preds[0], _spread(preds)[1], "aleatoric", "tta", len(ALL_TRANSFORMS))


@dataclass(frozen=True)
class PatchConfig:
    d: int = 100
    s: int = 10

    def validate(self, height: int, width: int) -> None:
        if not 1 <= self.s <= self.d:
            raise ValueError(f"need 1 <= stride <= patch size, got s={self.s}, d={self.d}")
        if self.d > min(height, width):
            raise ValueError(f"patch size {self.d} exceeds grid {height}x{width}")


def window_starts(n: int, d: int, s: int) -> np.ndarray:
    """Sliding-window offsets along one axis, plus one window flush with the far edge."""
    starts = list(range(0, n - d + 1, s))
    if starts[-1] != n - d:
        starts.append(n - d)
    return np.asarray(starts)


def patch_coverage(height: int, width: int, cfg: PatchConfig) -> np.ndarray:
    """Number of sliding windows covering each pixel, shape (height, width)."""
    cfg.validate(height, width)
    rows = np.zeros(height, dtype=np.int64)
    cols = np.zeros(width, dtype=np.int64)
    for r in window_starts(height, cfg.d, cfg.s):
        rows[r:r + cfg.d] += 1
    for c in window_starts(width, cfg.d, cfg.s):
        cols[c:c + cfg.d] += 1
    return np.outer(rows, cols)


def expected_patch_count(i: int, j: int, height: int, width: int, d: int, s: int) -> int:
    """Idealized number of d x d windows at stride s covering 1-based pixel (i, j).

    Hops to the nearest border are capped at ``d``: a pixel further from the
    border than one patch length is covered by the full d/s windows per axis.
    """
    if not (1 <= i <= height and 1 <= j <= width):
        raise IndexError(f"pixel ({i}, {j}) outside a {height}x{width} grid")

    def f(x):
        return int(np.floor(x)) if x >= 1 else int(np.ceil(x))

    d_v = min(min(abs(1 - i), abs(height - i)) + 1, d)
    d_h = min(min(abs(1 - j), abs(width - j)) + 1, d)
    return f(d_v / s) * f(d_h / s)


def patch_predictions(model: Predictor, inputs, cfg: PatchConfig, chunk: int = 64):
    """Yield ``(row, col, prediction)`` for every window, predictions shaped (d, d, c)."""
    x = np.asarray(inputs)
    h, w = x.shape[-3], x.shape[-2]
    cfg.validate(h, w)
    coords = [(r, c) for r in window_starts(h, cfg.d, cfg.s) for c in window_starts(w, cfg.d, cfg.s)]
    for k in range(0, len(coords), chunk):
        block = coords[k:k + chunk]
        crops = np.stack([x[..., r:r + cfg.d, c:c + cfg.d, :] for r, c in block])
        for (r, c), pred in zip(block, model.forward(crops)):
            yield r, c, pred


def patch_estimate(model: Predictor, inputs, cfg: PatchConfig) -> UQEstimate:
    """Per-pixel mean and population std over all covering window predictions."""
    x = np.asarray(inputs)
    h, w = x.shape[-3], x.shape[-2]
    total = sq = None
    count = np.zeros((h, w), dtype=np.int64)
    for r, c, pred in patch_predictions(model, x, cfg):
        if total is None:
            total = np.zeros((h, w) + pred.shape[2:])
            sq = np.zeros_like(total)
        total[r:r + cfg.d, c:c + cfg.d] += pred
        sq[r:r + cfg.d, c:c + cfg.d] += pred**2
        count[r:r + cfg.d, c:c + cfg.d] += 1
    n = count[:, :, None]
    mu = total / n
    var = np.maximum(sq / n - mu**2, 0.0)
    return UQEstimate(mu, np.sqrt(var), "aleatoric", "patches", count)


def combine_predictive(epi: UQEstimate, alea: UQEstimate, method: str | None = None) -> UQEstimate:
    """Additive predictive uncertainty; the point estimate comes from the epistemic part."""
    if epi.kind != "epistemic" or alea.kind != "aleatoric":
        raise ValueError(f"expected (epistemic, aleatoric), got ({epi.kind}, {alea.kind})")
    if np.shape(epi.sigma) != np.shape(alea.sigma):
        raise ValueError("estimates differ in shape")
    return UQEstimate(epi.mu, epi.sigma + alea.sigma, "predictive",
                      method or f"{alea.method}+{epi.method}", epi.m)


def tta_ens_estimate(ens: EnsembleModel, inputs) -> tuple[UQEstimate, UQEstimate, UQEstimate]:
    """Ensemble of TTA runs.

    Returns ``(predictive, epistemic, aleatoric)``: the epistemic part is the
    spread of the members' unaugmented predictions, the aleatoric part the
    member-mean of per-member TTA spreads.
    """
    per_member = np.stack([tta_predictions(m, inputs) for m in ens.members])  # (M, 8, h, w, c)
    orig = per_member[:, 0]
    epi = UQEstimate(*_spread(orig), "epistemic", "ens", len(ens))
    alea_sigma = _spread(per_member, axis=1)[1].mean(axis=0)
    alea = UQEstimate(epi.mu, alea_sigma, "aleatoric", "tta", len(ALL_TRANSFORMS))
    return combine_predictive(epi, alea, "tta-ens"), epi, alea


def patches_ens_estimate(ens: EnsembleModel, inputs, cfg: PatchConfig):
    """Ensemble of patch runs, combined like :func:`tta_ens_estimate`."""
    epi = UQEstimate(*_spread(ens.forward_all(inputs)), "epistemic", "ens", len(ens))
    patch = [patch_estimate(m, inputs, cfg) for m in ens.members]
    alea_sigma = np.mean([p.sigma for p in patch], axis=0)
    alea = UQEstimate(epi.mu, alea_sigma, "aleatoric", "patches", patch[0].m)
    return combine_predictive(epi, alea, "patches-ens"), epi, alea


def cub_estimate(test_predictions: Sequence[np.ndarray]) -> UQEstimate:
    """Constant-uncertainty baseline: one per-cell std across all test predictions.

    Returns an estimate whose ``mu`` is the prediction stack and whose
    ``sigma`` repeats the same per-cell spread for every test sample.
    """
    preds = np.asarray(test_predictions, dtype=np.float64)
    if len(preds) < 2:
        raise ValueError("the constant baseline needs at least 2 test predictions")
    sigma = np.broadcast_to(_spread(preds)[1], preds.shape).copy()
    return UQEstimate(preds, sigma, "epistemic", "cub", len(preds))
