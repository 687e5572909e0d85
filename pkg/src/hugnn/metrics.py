"""Classification accuracy and expected calibration error."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def accuracy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked nodes whose argmax class (ties to the lowest id)
    matches the label."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("accuracy over an empty mask is undefined")
    pred = np.argmax(probs[mask], axis=1)
    return float(np.mean(pred == labels[mask]))


@dataclass
class EceReport:
    ece: float
    bins: int
    bin_confidence: list = field(default_factory=list)
    bin_accuracy: list = field(default_factory=list)
    bin_count: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "ece": self.ece,
            "bins": self.bins,
            "bin_confidence": self.bin_confidence,
            "bin_accuracy": self.bin_accuracy,
            "bin_count": self.bin_count,
        }


def ece(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray,
        bins: int = 15) -> EceReport:
    """Expected calibration error over equal-width confidence bins on [0,1].

    Confidence is the max predicted probability; each bin contributes
    (count/N) * |bin accuracy - bin mean confidence|; empty bins contribute
    nothing. Confidence exactly 1.0 lands in the top bin.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("ece over an empty mask is undefined")
    p = probs[mask]
    y = labels[mask]
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(float)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    total = conf.shape[0]
    value = 0.0
    bin_conf, bin_acc, bin_count = [], [], []
    for b in range(bins):
        in_bin = idx == b
        count = int(in_bin.sum())
        bin_count.append(count)
        if count == 0:
            bin_conf.append(0.0)
            bin_acc.append(0.0)
            continue
        c = float(conf[in_bin].mean())
        a = float(correct[in_bin].mean())
        bin_conf.append(c)
        bin_acc.append(a)
        value += (count / total) * abs(a - c)
    return EceReport(ece=float(value), bins=bins, bin_confidence=bin_conf,
                     bin_accuracy=bin_acc, bin_count=bin_count)
