"""
Loss terms and metrics on hand-sized inputs
===========================================

Walks through the four loss terms and the evaluation metrics on inputs small
enough to check by hand.
"""

import numpy as np
import torch

from mtrcnet import evaluation, losses

# A tool branch that is unsure about one tool and sure about the rest.
p = torch.full((1, 1, 7), 1e-7, dtype=torch.float64)
p[0, 0, 0] = 0.5
y = torch.zeros(1, 1, 7)
y[0, 0, 0] = 1
print("tool loss, one tool at 0.5:", losses.tool_loss(p, y).item())  # ln 2

# Phase cross-entropy of a uniform guess is ln 7.
uniform = torch.full((1, 4, 7), 1 / 7, dtype=torch.float64)
print("phase loss, uniform:", losses.phase_loss(uniform, torch.zeros(1, 4, dtype=torch.long)).item())

###############################################################################
# The correlation loss is a symmetric Bernoulli KL between the tool branch and
# the prior mapped from phase features. It is zero when they agree and grows
# as either side moves away.

prior = torch.full((1, 1, 7), 0.3, dtype=torch.float64)
for v in (0.3, 0.5, 0.8, 0.95):
    pred = prior.clone()
    pred[0, 0, 3] = v
    print(f"tool 3 at {v:.2f} vs prior 0.30 -> L_co = {losses.correlation_loss(pred, prior).item():.4f}")

###############################################################################
# The overall objective weights the terms by (lambda1, lambda2, lambda3).

comps = {"tool": torch.tensor(1.0), "phase": torch.tensor(2.0), "corr": torch.tensor(0.4)}
total, breakdown = losses.total_loss(comps, 10.0)
print("total:", float(total), breakdown)

###############################################################################
# Metrics. Ground truth is phase A for six frames then B for four; the
# prediction switches one frame early.

gt = [0] * 6 + [1] * 4
pred = [0] * 5 + [1] * 5
scores = evaluation.phase_pr_re(gt, pred, 2)
print("precision", scores.precision, "recall", scores.recall)
print("accuracy", evaluation.video_accuracy(gt, pred))
print("AP of [0.9, 0.8, 0.3] vs [1, 0, 1]:", evaluation.average_precision([0.9, 0.8, 0.3], [1, 0, 1]))
print("F1(0.869, 0.880) =", round(evaluation.f1(0.869, 0.880), 4))

m, support = evaluation.confusion_matrix(gt, pred, 2)
print("confusion (rows = ground truth):\n", np.round(m, 3))
