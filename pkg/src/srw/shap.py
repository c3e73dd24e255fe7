"""Model-agnostic Shapley attributions over block partitions of an image.

A coalition is a 0/1 vector over the M features; present features keep the
input's pixels, absent ones take the background's. The explained function
maps a batch of inputs to an (N, K) array of class scores.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from srw.nn import forward, predict

MAX_EXACT_FEATURES = 20


@dataclass(frozen=True)
class FeaturePartition:
    """Assignment of every (row, col, channel) pixel to one of ``n_features``."""

    assignment: np.ndarray
    n_features: int
    block: tuple = None
    per_channel: bool = True

    def __post_init__(self):
        counts = np.bincount(self.assignment.ravel(), minlength=self.n_features)
        if len(counts) != self.n_features or np.any(counts == 0):
            raise ValueError("every feature must own at least one pixel")

    @property
    def shape(self):
        return self.assignment.shape

    def counts(self):
        return np.bincount(self.assignment.ravel(), minlength=self.n_features)

    def pixel_masks(self, coalitions):
        """(B, M) coalitions -> (B, H, W, C) boolean keep-masks."""
        coalitions = np.asarray(coalitions, dtype=bool)
        return coalitions[:, self.assignment]


def partition_grid(shape, block_rows, block_cols, per_channel=True):
    """Tile an (H, W, C) input with ``block_rows`` x ``block_cols`` blocks.

    With ``per_channel`` every channel gets its own features (channel-major
    numbering); otherwise one feature covers the block in all channels.
    """
    h, w, c = shape
    if h % block_rows or w % block_cols:
        raise ValueError(f"{block_rows}x{block_cols} blocks do not tile a {h}x{w} image")
    nr, nc = h // block_rows, w // block_cols
    rows = np.arange(h)[:, None] // block_rows
    cols = np.arange(w)[None, :] // block_cols
    spatial = rows * nc + cols
    if per_channel:
        assignment = spatial[:, :, None] + nr * nc * np.arange(c)[None, None, :]
        m = nr * nc * c
    else:
        assignment = np.repeat(spatial[:, :, None], c, axis=2)
        m = nr * nc
    return FeaturePartition(assignment.astype(np.int64), m, (block_rows, block_cols), per_channel)


def mask_apply(x, coalition, partition, background):
    """Input with absent features replaced by the background."""
    z = np.asarray(coalition)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != partition.n_features:
        raise ValueError(f"coalition has {z.shape[1]} bits, partition has {partition.n_features} features")
    keep = partition.pixel_masks(z)
    out = np.where(keep, x[None], background[None]).astype(x.dtype, copy=False)
    return out[0] if single else out


@dataclass
class ShapResult:
    classes: tuple
    base_values: np.ndarray      # (K,) output on the fully masked input
    values: np.ndarray           # (K, M)
    output: np.ndarray           # (K,) output on the unmasked input
    mode: str
    n_permutations: int = 0
    stderr: np.ndarray = None    # (K, M), sampled mode only

    def for_class(self, c):
        return self.values[self.classes.index(c)]

    def efficiency_gap(self):
        return self.base_values + self.values.sum(axis=1) - self.output


def _evaluate(predict_fn, x, coalitions, partition, background, classes, batch_size):
    out = []
    for start in range(0, len(coalitions), batch_size):
        scores = np.asarray(predict_fn(mask_apply(x, coalitions[start:start + batch_size], partition, background)))
        if scores.ndim == 1:
            scores = scores[:, None]
        out.append(scores if classes is None else scores[:, list(classes)])
    return np.concatenate(out).astype(np.float64)


def _check_inputs(x, partition, background):
    if x.shape != partition.shape:
        raise ValueError(f"input shape {x.shape} does not match partition {partition.shape}")
    if background.shape != x.shape:
        raise ValueError(f"background shape {background.shape} differs from input {x.shape}")


def shapley_exact(predict_fn, x, classes, partition, background, batch_size=1024):
    """Exact Shapley values by evaluating all 2^M coalitions."""
    x, background = np.asarray(x), np.asarray(background)
    _check_inputs(x, partition, background)
    m = partition.n_features
    if m > MAX_EXACT_FEATURES:
        raise ValueError(f"exact mode supports at most {MAX_EXACT_FEATURES} features, got {m}")
    codes = np.arange(2 ** m, dtype=np.int64)
    bits = ((codes[:, None] >> np.arange(m)) & 1).astype(bool)
    classes = None if classes is None else tuple(np.atleast_1d(classes).tolist())
    v = _evaluate(predict_fn, x, bits, partition, background, classes, batch_size)
    size = bits.sum(axis=1)
    # weight of a coalition S (without i) of size s: s! (M - s - 1)! / M!
    kernel = np.array([math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)])
    values = np.empty((v.shape[1], m))
    for i in range(m):
        without = codes[~bits[:, i]]
        wts = kernel[size[without]]
        values[:, i] = wts @ (v[without | (1 << i)] - v[without])
    if classes is None:
        classes = tuple(range(v.shape[1]))
    return ShapResult(classes, v[0], values, v[-1], "exact")


def shapley_sampled(predict_fn, x, classes, partition, background, n_permutations, rng,
                    exhaustive=False, batch_size=1024):
    """Permutation-sampling Shapley estimate with per-feature standard errors.

    Each ordering adds features one at a time, so every permutation's
    contributions telescope to output minus base value. With ``exhaustive``
    all M! orderings are used instead of ``n_permutations`` random ones.
    """
    x, background = np.asarray(x), np.asarray(background)
    _check_inputs(x, partition, background)
    m = partition.n_features
    if exhaustive:
        perms = np.array(list(itertools.permutations(range(m))), dtype=np.int64)
    else:
        if n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        perms = np.array([rng.permutation(m) for _ in range(n_permutations)], dtype=np.int64)
    n = len(perms)
    classes = None if classes is None else tuple(np.atleast_1d(classes).tolist())

    # coalition after k additions: first k features of the ordering present
    steps = np.arange(m + 1)[:, None] > np.arange(m)[None, :]          # (M+1, M) by position
    chains = np.zeros((n, m + 1, m), dtype=bool)
    rows = np.arange(n)[:, None, None]
    chains[rows, np.arange(m + 1)[None, :, None], perms[:, None, :]] = steps[None]
    v = _evaluate(predict_fn, x, chains.reshape(-1, m), partition, background, classes, batch_size)
    v = v.reshape(n, m + 1, -1)
    contrib = np.empty((n, m, v.shape[2]))
    contrib[np.arange(n)[:, None], perms] = np.diff(v, axis=1)
    values = contrib.mean(axis=0).T
    if n > 1:
        stderr = contrib.std(axis=0, ddof=1).T / np.sqrt(n)
    else:
        stderr = np.full_like(values, np.nan)
    if classes is None:
        classes = tuple(range(v.shape[2]))
    mode = "enumerated" if exhaustive else "sampled"
    return ShapResult(classes, v[0, 0], values, v[0, -1], mode, n, stderr)


def attributions_to_maps(result, partition):
    """Spread each feature's value evenly over its pixels.

    Returns (K, C, H, W): one map per explained class and input channel.
    """
    per_pixel = result.values / partition.counts()[None, :]
    maps = per_pixel[:, partition.assignment]                  # (K, H, W, C)
    return maps.transpose(0, 3, 1, 2)


def model_predict_fn(model, output="probability", batch_size=512):
    """Explained function for a trained network (infer mode)."""
    model = model.eval()
    if output == "probability":
        def fn(batch):
            return predict(model, batch, batch_size)[1]
    elif output == "logit":
        def fn(batch):
            return np.concatenate([forward(model, batch[i:i + batch_size])[1]
                                   for i in range(0, len(batch), batch_size)])
    else:
        raise ValueError(f"unknown output {output!r}")
    return fn


@dataclass
class SampleExplanation:
    sample_id: int
    label: int
    predicted: int
    maps_true: np.ndarray        # (C, H, W), explaining the ground-truth class
    maps_pred: np.ndarray        # (C, H, W), explaining the predicted class
    result: ShapResult


def explain_wrong_samples(model, x, labels, predicted, sample_ids, partition, background,
                          mode="sampled", n_permutations=8, seed=0, output="probability"):
    """SHAP map pairs (true class, predicted class) for misclassified samples."""
    labels, predicted = np.asarray(labels), np.asarray(predicted)
    if np.any(labels == predicted):
        bad = np.asarray(sample_ids)[labels == predicted]
        raise ValueError(f"samples {bad[:5].tolist()} are correctly classified")
    fn = model_predict_fn(model, output)
    out = []
    for xi, y, yhat, sid in zip(x, labels, predicted, sample_ids):
        classes = (int(y), int(yhat))
        if mode == "exact":
            res = shapley_exact(fn, xi, classes, partition, background)
        elif mode == "sampled":
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(sid)]))
            res = shapley_sampled(fn, xi, classes, partition, background, n_permutations, rng)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        maps = attributions_to_maps(res, partition)
        out.append(SampleExplanation(int(sid), int(y), int(yhat), maps[0], maps[1], res))
    return out
