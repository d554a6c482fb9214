"""Evaluation metrics on hand-built cases.

Run: python demos/03_metrics_walkthrough.py
"""
import numpy as np

from mhmr import metrics

# %% matching: two ground-truth heads, one prediction near the first
m = metrics.match_people([[6.0, 5.0]], [[5.0, 5.0], [20.0, 9.0]], threshold=8.0)
print("pairs", m.pairs, "precision", m.precision, "recall", m.recall, "F1", round(m.f1, 4))

# %% PCK: one of 14 joints off by 20 cm
J = np.random.default_rng(0).normal(size=(14, 3))
P = J.copy()
P[3, 0] += 0.2
print("PCK3D:", round(metrics.pck3d(P, J), 4))

# %% PCOD: ordinal depth agreement over pairs
print("PCOD:", metrics.pcod([3, 1, 2], [1, 2, 3]))

# %% Procrustes removes scale / rotation / translation
G = np.random.default_rng(1).normal(size=(50, 3))
c, s = np.cos(0.4), np.sin(0.4)
R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
print("PVE", round(metrics.pve(1.3 * G @ R.T + 0.5, G), 1),
      "PA-PVE", round(metrics.pve(1.3 * G @ R.T + 0.5, G, align="procrustes"), 6))
