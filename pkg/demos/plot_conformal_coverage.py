"""
How often does a conformal interval cover the truth?
=====================================================

With C calibration samples and miscoverage alpha, the coverage of a split
conformal interval is itself random: it follows Beta(C + 1 - l, l) with
l = floor((C + 1) alpha).  Here we draw many calibration sets and compare
the observed coverages with that law.
"""

from pathlib import Path

import numpy as np
from scipy import stats

from gridcal import svg
from gridcal.conformal import build_interval, calibrate_qhat, conformity_scores, nominal_coverage_law

rng = np.random.default_rng(0)
C, alpha, n_test = 100, 0.1, 5000

# heteroscedastic data and a sigma estimate of the right shape but wrong scale;
# normalized scores make the interval width follow sigma anyway
coverages = []
for _ in range(400):
    x = rng.uniform(0, 1, C + n_test)
    y = np.sin(6 * x) + (0.5 + 2 * x) * rng.standard_normal(x.size)
    mu, sigma = np.sin(6 * x), 0.2 + x
    qhat = calibrate_qhat(conformity_scores(y[:C], mu[:C], sigma[:C]), alpha)
    iv = build_interval(mu[C:], sigma[C:], qhat)
    coverages.append(np.mean((y[C:] >= iv.lower) & (y[C:] <= iv.upper)))
coverages = np.array(coverages)

law = nominal_coverage_law(C, alpha)
print(f"nominal law Beta({law.a:g}, {law.b:g}), mean {law.mean:.4f}")
print(f"observed mean {coverages.mean():.4f}, std {coverages.std():.4f} "
      f"(law std {stats.beta.std(law.a, law.b):.4f})")
lo, hi = law.interval(0.9)
print(f"90% of splits should land in [{lo:.3f}, {hi:.3f}]: {np.mean((coverages >= lo) & (coverages <= hi)):.1%} do")

out = Path("demo_output")
out.mkdir(exist_ok=True)
svg.histogram(coverages, out / "coverage.svg", f"coverage over 400 splits vs Beta({law.a:g}, {law.b:g})",
              "coverage", bins=30, value_range=(0.75, 1.0),
              density=lambda v: stats.beta.pdf(v, law.a, law.b))
print(f"histogram written to {out / 'coverage.svg'}")
