# coding: utf-8
# # Skill metrics on toy series
#
# The metrics module works on any pair of field series. Here they are
# applied to hand-made inputs whose answers are known.

import numpy as np

from fieldtransform import field, metrics

rng = np.random.default_rng(0)
spec = field.GridSpec(8, 8)

# Gain: the transformed field halves the error, so the MSE drops by 75 %.

ref = rng.standard_normal((20, 1, 8, 8, 2))
model = ref + 0.2 * rng.standard_normal(ref.shape)
better = ref + 0.5 * (model - ref)
R, M, T = (field.FieldSeries.masked(spec, d) for d in (ref, model, better))
mm, mt = metrics.mse_series(R, M), metrics.mse_series(R, T)
print("gain %", metrics.gain(mm, mt), "signed %", metrics.signed_change(mm, mt))

# EOF-1 of a rank-one series recovers the spatial pattern and explains all
# the variance.

pattern = rng.standard_normal((8, 8, 2))
amp = np.sin(np.linspace(0, 6, 30))
rank1 = field.FieldSeries.masked(spec, amp[:, None, None, None, None] * pattern[None, None])
mode = metrics.eof_mode1(rank1)
print("explained variance", mode.explained)

# Taylor statistics obey crmse^2 = std_r^2 + std_c^2 - 2 std_r std_c cc.

r = rng.standard_normal(50)
c = 0.7 * r + 0.3 * rng.standard_normal(50)
ts = metrics.taylor_from_series(r, c)
lhs = ts.crmse ** 2
rhs = ts.std_ref ** 2 + ts.std_cand ** 2 - 2 * ts.std_ref * ts.std_cand * ts.cc
print("Taylor identity residual", lhs - rhs)
