# coding: utf-8

# # Missing frames, simulation and motion transport
#
# The same trained model answers three more questions:
# which fields fit frames it never saw, what motion it expects from a
# reference frame alone, and what another subject's motion looks like on a
# new reference frame. Pass a checkpoint (e.g. from the acceptance cache or
# `gpmotion train`) as the first argument; otherwise a short run is trained.

# In[1]:

import sys

import numpy as np

from gpmotion import cli
from gpmotion import model as m
from gpmotion import synthdata as sd
from gpmotion.metrics import ejection_fraction, volume_curve

spec = sd.SyntheticSpec()
if len(sys.argv) > 1:
    model = m.load_checkpoint(sys.argv[1])
else:
    model = m.train(sd.generate_dataset(30, spec, seed=1), m.ModelConfig(), m.TrainConfig(epochs=3)).model

rec = sd.generate_dataset(1, spec, seed=7)[0]
slots = m.pair_slots(rec.n_frames - 1, model.config.t_lat)
full = model.register(rec.frames).fields
reference = volume_curve(rec.masks[0], full, rec.spacing)

# ## Interpolation from a subset of frames
#
# Unprovided columns of the feature matrix stay zero. The linear baseline
# interpolates the model's own fields between the provided frames.

# In[2]:

for provide in ("every2", "first5", "frames 0,10"):
    pairs = cli.parse_provide(provide, rec.n_frames)
    fields = model.interpolate(rec.frames, pairs)[slots]
    linear = cli.interpolate_baseline(pairs + 1, fields[pairs], rec.n_frames, "linear")
    err = [np.sqrt(np.mean((volume_curve(rec.masks[0], f, rec.spacing) - reference) ** 2))
           for f in (fields, linear)]
    print(f"{provide:12s} curve RMSE model {err[0]:6.1f}  linear {err[1]:6.1f} mm^2")

# ## Simulation from frame 0 only

# In[3]:

sim = model.simulate(rec.frames[0])[slots]
curve = volume_curve(rec.masks[0], sim, rec.spacing)
print("simulated area ratio by frame:", np.round(curve / curve[0], 3))
print("ground truth:                 ", np.round(sd.ground_truth_volume_curve(rec) / reference[0], 3))

# ## Transport
#
# A strongly contracting source's motion matrix decoded on a weakly
# contracting subject's reference frame.

# In[4]:

src = sd.generate_dataset(1, spec, seed=11, contraction_range=(0.45, 0.45))[0]
tgt = sd.generate_dataset(1, spec, seed=12, contraction_range=(0.15, 0.15))[0]
z = model.register(src.frames).motion
moved = model.transport(z, tgt.frames[0])[slots]
print("EF source %.3f  target %.3f  transported %.3f" % (
    ejection_fraction(sd.ground_truth_volume_curve(src)),
    ejection_fraction(sd.ground_truth_volume_curve(tgt)),
    ejection_fraction(volume_curve(tgt.masks[0], moved, tgt.spacing))))
