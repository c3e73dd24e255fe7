"""Weighted (optionally stability-) training with early stopping."""

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from srw import losses
from srw.augment import AugmentConfig, augment_batch, make_stability_batch
from srw.nn import Adam, backward_and_step, forward, predict, softmax, softmax_backward

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    patience: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    stability: bool = False
    sigma: float = 0.01
    kl_mode: bool = False
    metric_loss: str = "lar"      # "lar", "hinge" or "none"
    triplet_cap: int = 512
    augment: bool = False

    def to_dict(self):
        return asdict(self)


def loss_and_grads(model, x, labels, weights, rng, config):
    """Forward pass plus the loss gradients w.r.t. embeddings and logits.

    Regular mode: metric loss on the embeddings + weighted cross-entropy.
    Stability mode: the batch is doubled with a noisy copy and the two
    stability terms are added; batch-norm sees the concatenated batch.
    Triplets are mined before any noise is drawn, so both modes consume the
    RNG identically up to that point.
    """
    n = len(x)
    triplets = None
    if config.metric_loss != "none":
        triplets = losses.mine_triplets(labels, model.n_classes, rng, config.triplet_cap)
    batch = make_stability_batch(x, config.sigma, rng) if config.stability else x
    emb, logits, trace = forward(model, batch)
    probs = softmax(logits.astype(np.float64))

    emb_c, p_c = emb[:n], probs[:n]
    if config.metric_loss == "lar":
        l0_emb, d_emb_c = losses.lar_loss(emb_c, triplets)
    elif config.metric_loss == "hinge":
        l0_emb, d_emb_c = losses.triplet_hinge_loss(emb_c, triplets)
    else:
        l0_emb, d_emb_c = 0.0, np.zeros(emb_c.shape)
    l0_class, d_p_c, nll = losses.weighted_cross_entropy(p_c, labels, weights)

    d_emb = np.zeros(emb.shape)
    d_prob = np.zeros(probs.shape)
    d_emb[:n] += d_emb_c
    d_prob[:n] += d_p_c
    ls_emb = ls_class = 0.0
    if config.stability:
        ls_emb, (g_c, g_n) = losses.embedding_stability(emb[:n], emb[n:])
        mode = "kl" if config.kl_mode else "cross_entropy"
        ls_class, (dp_c, dp_n) = losses.classification_stability(p_c, probs[n:], mode)
        d_emb[:n] += g_c
        d_emb[n:] += g_n
        d_prob[:n] += dp_c
        d_prob[n:] += dp_n

    breakdown = losses.stability_total(
        l0_emb, ls_emb, l0_class, ls_class,
        per_sample_ce=nll,
        weights=np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64),
        lar_empty=triplets is not None and triplets.empty,
    )
    d_logits = softmax_backward(d_prob, probs)
    dtype = model.dtype
    return breakdown, (d_emb.astype(dtype), d_logits.astype(dtype)), trace


def accuracy(model, x, labels, batch_size=256):
    pred, _ = predict(model, x, batch_size)
    return float((pred == labels).mean()) if len(labels) else float("nan")


@dataclass
class TrainResult:
    model: object
    best_epoch: int
    best_val_acc: float
    history: list          # per epoch: (epoch, mean loss, val acc)
    step_log: list         # per step: (step, l0_emb, lstable_emb, l0_class, lstable_class, total)
    seconds: float


def train(model, x, labels, weights, valid_x, valid_labels, config, seed,
          augment_config=None, sample_ids=None, forbidden_ids=None):
    """Minimise the (weighted) loss; return the best-validation epoch's model.

    ``forbidden_ids`` (e.g. the test split) must not appear in ``sample_ids``.
    """
    if len(labels) == 0:
        raise ValueError("empty training set")
    if sample_ids is not None and forbidden_ids is not None:
        leaked = np.intersect1d(np.asarray(sample_ids), np.asarray(forbidden_ids))
        if len(leaked):
            raise AssertionError(f"{len(leaked)} held-out samples in the training set")
    weights = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(weights) != len(labels):
        raise ValueError(f"{len(weights)} weights for {len(labels)} samples")
    aug = augment_config or AugmentConfig()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A1]))
    opt = Adam(lr=config.lr)
    model = model.training()
    # only trained epochs compete; the starting point is returned only if no epoch ran
    best = None
    history, step_log = [], []
    stale, step = 0, 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(labels))
        losses_ep = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            xb = x[idx]
            if config.augment:
                xb = augment_batch(xb, aug, rng)
            bd, grads, trace = loss_and_grads(model, xb, labels[idx], weights[idx], rng, config)
            if not np.isfinite(bd.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}: {bd.row()}")
            model = backward_and_step(model, trace, grads, opt)
            step += 1
            step_log.append((step, *bd.row()))
            losses_ep.append(bd.total)
        val_acc = accuracy(model.eval(), valid_x, valid_labels)
        history.append((epoch, float(np.mean(losses_ep)), val_acc))
        log.debug("epoch %d loss %.4f val %.4f", epoch, history[-1][1], val_acc)
        if best is None or val_acc > best[0]:
            best = (val_acc, epoch, model.eval())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best is None:
        best = (accuracy(model.eval(), valid_x, valid_labels), 0, model.eval())
    return TrainResult(best[2], best[1], best[0], history, step_log, time.perf_counter() - t0)
