"""Per-sample retraining weights from prediction probabilities or SHAP maps."""

import csv
from dataclasses import dataclass, field

import numpy as np

METHODS = ("none", "softmax", "masked_diff", "localize_diff")
DEFAULT_FLOOR = 0.05


def softmax_weight(prob_vector, predicted, label):
    """1 for a correct prediction, else 1 + P(predicted) - P(label)."""
    if predicted == label:
        return 1.0
    p = np.asarray(prob_vector, dtype=np.float64)
    return float(1.0 + p[predicted] - p[label])


def _check_pair(maps_pred, maps_true):
    maps_pred, maps_true = np.asarray(maps_pred, np.float64), np.asarray(maps_true, np.float64)
    if maps_pred.shape != maps_true.shape:
        raise ValueError(f"map shapes differ: {maps_pred.shape} vs {maps_true.shape}")
    if maps_pred.ndim == 2:
        maps_pred, maps_true = maps_pred[None], maps_true[None]
    return maps_pred, maps_true


def masked_difference(maps_pred, maps_true):
    """Sum over channels of the mean (pred - true) where the pred map is positive.

    Maps are (C, H, W) or a single (H, W) channel. A channel without positive
    pixels in the predicted-class map contributes 0.
    """
    maps_pred, maps_true = _check_pair(maps_pred, maps_true)
    total = 0.0
    for mp, mt in zip(maps_pred, maps_true):
        positive = mp > 0
        if positive.any():
            total += float((mp[positive] - mt[positive]).mean())
    return total


def localize_difference(maps_pred, maps_true):
    """Sum over all channels and pixels of (pred - true)."""
    maps_pred, maps_true = _check_pair(maps_pred, maps_true)
    return float((maps_pred - maps_true).sum())


@dataclass
class WeightTable:
    method: str
    session: int
    sample_ids: np.ndarray
    origins: np.ndarray
    delta_w: np.ndarray
    weights: np.ndarray
    incremental: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.incremental is None:
            self.incremental = np.zeros(len(self.sample_ids), dtype=bool)

    def __len__(self):
        return len(self.sample_ids)

    def as_dict(self):
        return {int(i): float(w) for i, w in zip(self.sample_ids, self.weights)}

    def extend(self, other):
        return WeightTable(
            other.method, other.session,
            np.concatenate([self.sample_ids, other.sample_ids]),
            np.concatenate([self.origins, other.origins]),
            np.concatenate([self.delta_w, other.delta_w]),
            np.concatenate([self.weights, other.weights]),
            np.concatenate([self.incremental, other.incremental]),
        )

    def summary(self):
        w = self.weights
        return {"mean": float(w.mean()), "min": float(w.min()), "max": float(w.max())} if len(w) else {}

    def write_csv(self, path):
        from srw.radar import origin_name
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["sample_id", "origin", "method", "delta_w", "weight"])
            for sid, org, dw, w in zip(self.sample_ids, self.origins, self.delta_w, self.weights):
                out.writerow([int(sid), origin_name(org), self.method, f"{dw:.9g}", f"{w:.9g}"])


def finalize_weights(sample_ids, origins, incremental, delta_w, method="none", session=0,
                     floor=DEFAULT_FLOOR):
    """w = 1 for baseline-train samples, max(1 + delta_w, floor) for incremental ones."""
    sample_ids = np.asarray(sample_ids, dtype=np.uint64)
    incremental = np.asarray(incremental, dtype=bool)
    delta = np.zeros(len(sample_ids)) if delta_w is None else np.asarray(delta_w, dtype=np.float64)
    if len(delta) != len(sample_ids):
        raise ValueError(f"missing delta_w: {len(delta)} values for {len(sample_ids)} samples")
    if np.any(np.isnan(delta[incremental])):
        raise ValueError("missing delta_w for an incremental sample")
    weights = np.where(incremental, np.maximum(1.0 + delta, floor), 1.0)
    delta = np.where(incremental, delta, 0.0)
    return WeightTable(method, session, sample_ids, np.asarray(origins, np.uint8), delta, weights, incremental)


def baseline_table(sample_ids, origins):
    n = len(sample_ids)
    return finalize_weights(sample_ids, origins, np.zeros(n, bool), np.zeros(n))


def incremental_deltas(method, probabilities=None, predicted=None, labels=None, explanations=None):
    """Delta-w per incremental sample for one weighting method."""
    if method == "none":
        n = len(labels) if labels is not None else len(explanations)
        return np.zeros(n)
    if method == "softmax":
        return np.array([softmax_weight(p, int(yh), int(y)) - 1.0
                         for p, yh, y in zip(probabilities, predicted, labels)])
    if method == "masked_diff":
        return np.array([masked_difference(e.maps_pred, e.maps_true) for e in explanations])
    if method == "localize_diff":
        return np.array([localize_difference(e.maps_pred, e.maps_true) for e in explanations])
    raise ValueError(f"unknown weighting method {method!r}; expected one of {METHODS}")
