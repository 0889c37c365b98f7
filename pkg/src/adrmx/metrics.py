from __future__ import annotations

import numpy as np


def accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax equals the label.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels).reshape(-1)
    if probs.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))
