# coding: utf-8
# # Backward mode
#
# In backward mode the network predicts a frame from the frames that follow
# it. That is the same problem as forward mode on the time-reversed series,
# which this script shows by training both ways and comparing outputs.

from dataclasses import replace

import numpy as np

from fieldtransform import field, pipeline, synth
from fieldtransform.pipeline import ExperimentSpec, TrainConfig

spec = replace(synth.TWIN_SPEC, nt=60, nx=16, ny=16)
truth, biased = synth.generate(spec)

# The held-out frames sit at the start of the series, since a backward model
# needs future frames as input.

cfg = TrainConfig(max_epochs=3, window=2)
back = ExperimentSpec(model_field=biased, obs_field=truth,
                      split=dict(train=(10, 60), test=(0, 10)), direction="backward",
                      base_channels=4, grid=None, train=cfg, out_dir="unused")
fwd = ExperimentSpec(model_field=field.reverse_time(biased), obs_field=field.reverse_time(truth),
                     split=dict(train=(0, 50), test=(50, 60)), direction="forward",
                     base_channels=4, grid=None, train=cfg, out_dir="unused")

rb = pipeline.run_experiment(back, write=False)
rf = pipeline.run_experiment(fwd, write=False)

a = rb.transformed.data
b = rf.transformed.data[::-1]
print("frames", a.shape[0], "max difference", np.abs(a - b).max())
print("backward gain", round(rb.report.gain_pct, 2), "forward gain", round(rf.report.gain_pct, 2))
