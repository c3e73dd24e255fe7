"""Stability-training losses and the sample-weighted cross-entropy.

Each loss returns ``(value, gradient)`` where the gradient has the shape of
the loss input (a tuple of gradients for two-input losses).
"""

from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12


def lar_delta(l_a, l_n, n_labels):
    """Circular label distance used to scale the anchor-negative similarity."""
    l_a, l_n = np.asarray(l_a), np.asarray(l_n)
    if np.any(l_a == l_n):
        raise ValueError("anchor and negative labels must differ")
    if np.any((l_a < 0) | (l_a >= n_labels) | (l_n < 0) | (l_n >= n_labels)):
        raise ValueError(f"labels must lie in [0, {n_labels})")
    d = np.abs(l_a - l_n)
    out = np.minimum(d, np.abs(n_labels - d))
    return out if out.ndim else int(out)


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    deltas: np.ndarray
    n_labels: int

    @property
    def empty(self):
        return len(self.anchors) == 0

    def __len__(self):
        return len(self.anchors)


def mine_triplets(labels, n_labels, rng=None, cap=512):
    """All (anchor, positive, negative) index triples, subsampled to ``cap``."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    mask = same[:, :, None] & (labels[:, None, None] != labels[None, None, :])
    a, p, n = np.nonzero(mask)
    if cap is not None and len(a) > cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(len(a), size=cap, replace=False))
        a, p, n = a[keep], p[keep], n[keep]
    deltas = lar_delta(labels[a], labels[n], n_labels) if len(a) else np.zeros(0, int)
    return TripletBatch(a, p, n, np.asarray(deltas, dtype=np.float64), n_labels)


def l2_normalize(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-12), norm


def l2_normalize_backward(du, u, norm):
    return (du - u * (du * u).sum(axis=-1, keepdims=True)) / np.maximum(norm, 1e-12)


def lar_loss(embeddings, triplets, normalize=True):
    """Label-aware ranking loss, averaged over anchors that own a triplet.

    For anchor i: log(1 + sum_t exp(log(dl_t) <a, n_t> - <a, p_t>)).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if triplets.empty:
        return 0.0, np.zeros_like(emb)
    u, norm = l2_normalize(emb) if normalize else (emb, None)
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    log_dl = np.log(triplets.deltas)
    s = log_dl * (u[a] * u[n]).sum(-1) - (u[a] * u[p]).sum(-1)
    e = np.exp(s)
    uniq, inv = np.unique(a, return_inverse=True)
    per_anchor = np.bincount(inv, weights=e, minlength=len(uniq))
    value = float(np.mean(np.log1p(per_anchor)))
    g = e / (1.0 + per_anchor[inv]) / len(uniq)
    du = np.zeros_like(u)
    np.add.at(du, a, g[:, None] * (log_dl[:, None] * u[n] - u[p]))
    np.add.at(du, n, (g * log_dl)[:, None] * u[a])
    np.add.at(du, p, -g[:, None] * u[a])
    if normalize:
        du = l2_normalize_backward(du, u, norm)
    return value, du


def triplet_hinge_loss(embeddings, triplets, margin=0.2, normalize=True):
    """Margin hinge on squared distances; comparison baseline for LAR."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if triplets.empty:
        return 0.0, np.zeros_like(emb)
    u, norm = l2_normalize(emb) if normalize else (emb, None)
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    dap, dan = u[a] - u[p], u[a] - u[n]
    h = (dap * dap).sum(-1) - (dan * dan).sum(-1) + margin
    active = (h > 0).astype(np.float64) / len(a)
    value = float(np.maximum(h, 0).mean())
    du = np.zeros_like(u)
    np.add.at(du, a, 2 * active[:, None] * (dap - dan))
    np.add.at(du, p, -2 * active[:, None] * dap)
    np.add.at(du, n, 2 * active[:, None] * dan)
    if normalize:
        du = l2_normalize_backward(du, u, norm)
    return value, du


def embedding_stability(f_clean, f_noisy):
    """Mean Euclidean distance between paired clean and noisy embeddings."""
    f_clean = np.asarray(f_clean, dtype=np.float64)
    f_noisy = np.asarray(f_noisy, dtype=np.float64)
    if f_clean.shape != f_noisy.shape:
        raise ValueError(f"unpaired batch: {f_clean.shape} vs {f_noisy.shape}")
    diff = f_clean - f_noisy
    dist = np.linalg.norm(diff, axis=-1)
    n = len(dist)
    # zero distance: use the zero subgradient
    g = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0) / n
    return float(dist.mean()), (g, -g)


def weighted_cross_entropy(probabilities, labels, weights=None):
    """sum_i w_i * -log P(y_i | x_i) / sum_i w_i.

    Returns ``(value, dprob, per_sample)`` with ``per_sample`` the unweighted
    negative log-likelihood of each row.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"{len(w)} weights for {n} samples")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    rows = np.arange(n)
    py = np.maximum(probs[rows, labels], PROB_FLOOR)
    nll = -np.log(py)
    value = float((w * nll).sum() / total)
    dprob = np.zeros_like(probs)
    dprob[rows, labels] = -w / (total * py)
    return value, dprob, nll


def classification_stability(p_clean, p_noisy, mode="cross_entropy"):
    """-sum_j P(j|x) log P(j|x'), averaged over pairs.

    ``mode="kl"`` subtracts the clean entropy, giving KL(P(.|x) || P(.|x')).
    """
    p = np.asarray(p_clean, dtype=np.float64)
    q = np.asarray(p_noisy, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"unpaired batch: {p.shape} vs {q.shape}")
    n = len(p)
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    value = -(p * log_q).sum() / n
    dp = -log_q / n
    dq = -p / np.maximum(q, PROB_FLOOR) / n
    if mode == "kl":
        log_p = np.log(np.maximum(p, PROB_FLOOR))
        value += (p * log_p).sum() / n
        dp = dp + (log_p + 1.0) / n
    elif mode != "cross_entropy":
        raise ValueError(f"unknown mode {mode!r}")
    return float(value), (dp, dq)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.maximum(p, PROB_FLOOR))).sum() / len(p))


@dataclass
class LossBreakdown:
    l0_emb: float = 0.0
    lstable_emb: float = 0.0
    l0_class: float = 0.0
    lstable_class: float = 0.0
    total: float = 0.0
    per_sample_ce: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lar_empty: bool = False

    def row(self):
        return [self.l0_emb, self.lstable_emb, self.l0_class, self.lstable_class, self.total]


def stability_total(l0_emb, lstable_emb, l0_class, lstable_class, **extra):
    """Equal-weight sum of the four components."""
    return LossBreakdown(l0_emb, lstable_emb, l0_class, lstable_class,
                         l0_emb + lstable_emb + l0_class + lstable_class, **extra)
