# coding: utf-8

# # Training and registration on synthetic sequences
#
# A short run on a handful of sequences, then posterior-mean registration
# of held-out ones against the undeformed baseline. The full acceptance
# setting is 200 sequences x 20 epochs (about 10 minutes on one core);
# pass a checkpoint path as the first argument to skip training.

# In[1]:

import sys
import time

import numpy as np

from gpmotion import model as m
from gpmotion import synthdata as sd
from gpmotion.metrics import EvalReport, evaluate_sequence

spec = sd.SyntheticSpec()
train_set = sd.generate_dataset(30, spec, seed=1)
test_set = sd.generate_dataset(8, spec, seed=2)

if len(sys.argv) > 1:
    model = m.load_checkpoint(sys.argv[1])
else:
    t0 = time.perf_counter()
    res = m.train(train_set, m.ModelConfig(), m.TrainConfig(epochs=3), seed=0)
    model = res.model
    print("trained %d steps in %.0f s" % (len(res.log), time.perf_counter() - t0))
    first, last = res.log[:30], res.log[-30:]
    print("loss first/last 30 steps: %.0f -> %.0f" % (np.mean([r["loss"] for r in first]),
                                                     np.mean([r["loss"] for r in last])))

print("parameters:", model.n_parameters())

# ## Registration
#
# One field per frame pair, read off the latent slots the pairs occupy.

# In[2]:

report = EvalReport()
for i, rec in enumerate(test_set):
    reg = model.register(rec.frames)
    report.add(**evaluate_sequence(rec, reg.fields, reg.warped, name=f"seq{i}"))
    report.add(**evaluate_sequence(rec, np.zeros_like(reg.fields), name=f"seq{i}", method="Und"))

for method, stats in report.aggregate().items():
    print(f"{method:6s} RMSE {stats['rmse']['mean']:.4f}  Dice pool {stats['dice_pool']['mean']:.3f}"
          f"  EPE {stats['endpoint_error']['mean']:.3f} px")

# ## The motion matrix
#
# Rows of the posterior mean are the latent trajectories; the contraction
# shows up as a slow swing in the first half of the cycle.

# In[3]:

np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(reg.motion.z[:3])
print("posterior variance multipliers s:", reg.posterior.s)
