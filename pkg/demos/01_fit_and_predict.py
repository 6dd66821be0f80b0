"""
Fitting the nested error model and predicting area means
=========================================================

Generate a small population, draw a stratified sample, fit by REML and
predict every area mean with its two MSE estimates and intervals.
"""

import numpy as np

from nersae import asymptotic_covariance, fit_reml, predict_areas
from nersae.sim import SamplingRule, SimConfig, generate_population, srswor, stream

# %%
# A population of 8 areas with one covariate, centered within areas, plus
# its area mean as a contextual effect.
config = SimConfig(area_sizes=(40, 60, 80, 100, 120, 150, 180, 200), sampling_rule=SamplingRule(small_n=20))
frame, truth = generate_population(config, stream(2024))
print("area sizes:", frame.sizes.tolist())

# %%
# One simple random sample without replacement per area.
sample = frame.sample(srswor(frame.sizes, config.sampling_rule, stream(2024, 1)))
print("sample sizes:", [a.n for a in sample.areas])

# %%
# REML fit.  The variance components are on the scale of the truth (4, 100).
fit = fit_reml(sample)
for name, value in fit.summary().items():
    print(f"{name:>16}: {value}")

# %%
# Predictions.  ``sam`` targets the finite-population mean, ``clp`` the
# conditional linear predictor; the LW interval is centered on ``sam`` and
# the PR interval on ``clp``.
cov = asymptotic_covariance(fit, sample)
print(f"\n{'area':>4} {'truth':>8} {'sam':>8} {'clp':>8} {'sqrt lw':>8} {'sqrt pr':>8}  sam-LW interval")
for p, t in zip(predict_areas(sample, fit, cov), truth.ybar):
    lo, hi = p.interval_sam_lw
    flag = "" if lo <= t <= hi else "  (misses)"
    print(f"{p.area_id:>4} {t:8.2f} {p.sam:8.2f} {p.clp:8.2f} {np.sqrt(p.mse_lw):8.3f} {np.sqrt(p.mse_pr):8.3f}"
          f"  [{lo:.2f}, {hi:.2f}]{flag}")
