"""
Metrics
=======

AUC with half credit for ties, and thresholded accuracy, precision and
sensitivity with undefined values kept visible.
"""
import numpy as np

from axial3d import evalbench as eb
from axial3d import oracles

scores = [0.2, 0.4, 0.6, 0.8]
labels = [0, 1, 0, 1]
print("AUC:", eb.auc(scores, labels), "brute force:", oracles.brute_force_auc(scores, labels))

# Ties count half.
print("all tied:", eb.auc([0.5] * 4, labels))

# AUC only depends on the ranking.
print("after exp():", eb.auc(np.exp(scores), labels))

print(eb.evaluate([0.9, 0.8, 0.3, 0.6], [1, 1, 0, 0]).line())
# Nothing predicted positive: precision has no denominator and says so.
print(eb.evaluate([0.1, 0.2, 0.3, 0.4], [1, 1, 0, 0]).line())
