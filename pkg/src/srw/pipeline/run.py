"""Baseline training, wrong-sample harvesting, reweighting and incremental sessions."""

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from srw.binfmt import save_explanations
from srw.nn import build_model, predict
from srw.nn import checkpoint
from srw.pipeline.config import ConfigError
from srw.pipeline.data import DataError, build_splits
from srw.pipeline.train import train
from srw.radar import RDIDataset
from srw.shap import explain_wrong_samples, partition_grid
from srw.weighting import baseline_table, finalize_weights, incremental_deltas

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["session", "step", "l0_emb", "lstable_emb", "l0_class", "lstable_class", "total"]


def derive_seed(seed, *keys):
    """Independent 32-bit seed for a named sub-stream of ``seed``."""
    words = [int(seed)] + [k if isinstance(k, int) else int.from_bytes(k.encode(), "little") % 2**32
                           for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def evaluate(model, dataset, n_classes):
    """Top-1 accuracy, per-class accuracy and confusion matrix (rows = true class)."""
    if len(dataset) == 0:
        raise DataError("empty evaluation set")
    pred, _ = predict(model.eval(), dataset.x)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (dataset.labels, pred), 1)
    counts = conf.sum(axis=1)
    per_class = np.divide(np.diag(conf), counts, out=np.full(n_classes, np.nan), where=counts > 0)
    return {
        "accuracy": float(np.trace(conf) / conf.sum()),
        "per_class": [float(v) for v in per_class],
        "confusion": conf.tolist(),
    }


@dataclass
class WrongSet:
    """Misclassified samples with the selecting model's predictions."""

    dataset: RDIDataset
    predicted: np.ndarray
    probabilities: np.ndarray
    n_evaluated: int

    def __len__(self):
        return len(self.dataset)


def select_wrong(model, dataset):
    pred, probs = predict(model.eval(), dataset.x)
    wrong = np.flatnonzero(pred != dataset.labels)
    return WrongSet(dataset.subset(wrong), pred[wrong], probs[wrong], len(dataset))


@dataclass
class SessionReport:
    session: int
    arm: str
    seed: int
    accuracy: float
    per_class: list
    confusion: list
    weights: dict
    n_train: int
    n_incremental: int
    init_digest: str
    best_digest: str
    best_epoch: int
    history: list
    config_hash: str

    def to_dict(self):
        return asdict(self)


class ShapCache:
    """Explanations keyed by (model digest, sample id, settings).

    Arms that share a model (e.g. every arm's first session) reuse maps.
    """

    def __init__(self):
        self._store = {}
        self.hits = 0

    def get_or_compute(self, model, wrong, shap_cfg, partition, background, seed):
        digest = checkpoint.param_digest(model)
        settings = (shap_cfg.mode, shap_cfg.n_permutations, tuple(shap_cfg.block), shap_cfg.background,
                    shap_cfg.output, int(seed))
        ds = wrong.dataset
        missing = [i for i, sid in enumerate(ds.ids) if (digest, int(sid), settings) not in self._store]
        self.hits += len(ds) - len(missing)
        if missing:
            new = explain_wrong_samples(model, ds.x[missing], ds.labels[missing], wrong.predicted[missing],
                                        ds.ids[missing], partition, background, mode=shap_cfg.mode,
                                        n_permutations=shap_cfg.n_permutations, seed=seed,
                                        output=shap_cfg.output)
            for e in new:
                self._store[(digest, e.sample_id, settings)] = e
        return [self._store[(digest, int(sid), settings)] for sid in ds.ids]


def shap_setup(config, splits):
    h, w, c = splits.main.x.shape[1:]
    partition = partition_grid((h, w, c), *config.shap.block)
    if config.shap.background == "mean":
        background = splits.main.x.mean(axis=0).astype(np.float32)
    elif config.shap.background == "zeros":
        background = np.zeros((h, w, c), np.float32)
    else:
        raise ConfigError(f"unknown shap background {config.shap.background!r}")
    return partition, background


def session_deltas(config, model, wrong, splits, session, cache=None):
    """Delta-w for the wrong samples of one session, plus explanations if SHAP was used."""
    method = config.weighting.method
    if method in ("masked_diff", "localize_diff"):
        partition, background = shap_setup(config, splits)
        cache = cache or ShapCache()
        expl = cache.get_or_compute(model, wrong, config.shap, partition, background,
                                    derive_seed(config.seed, "shap", session))
        return incremental_deltas(method, explanations=expl), expl
    return incremental_deltas(method, wrong.probabilities, wrong.predicted, wrong.dataset.labels), None


def retrain_config(config):
    cfg = config.retrain
    if config.stability.enabled:
        cfg = replace(cfg, stability=True, sigma=config.stability.sigma, kl_mode=config.stability.kl_mode)
    if config.source != "radar-sim":
        cfg = replace(cfg, augment=False)    # Doppler flip / range shift are radar-specific
    return cfg


def checkpoint_meta(config, splits, session):
    return {
        "channel_stats": {"mean": list(splits.stats.mean), "std": list(splits.stats.std)},
        "baseline_hash": config.baseline_hash(),
        "config_hash": config.hash(),
        "session": session,
    }


def train_baseline(config, splits):
    """θ^m: fresh model trained on D^m with unit weights."""
    model = build_model(config.descriptor(), derive_seed(config.seed, "init"))
    res = train(model, splits.main.x, splits.main.labels, None, splits.valid.x, splits.valid.labels,
                config.train, derive_seed(config.seed, "train", 0), sample_ids=splits.main.ids,
                forbidden_ids=splits.test.ids)
    res.model.meta = checkpoint_meta(config, splits, 0)
    return res


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRIC_COLUMNS)
        for session, row in rows:
            step, *vals = row
            out.writerow([session, step] + [repr(float(v)) for v in vals])


def retrain_incremental(baseline, splits, config, out_dir=None, arm=None, cache=None,
                        baseline_steps=(), baseline_epoch=0):
    """Run the incremental sessions from the baseline model.

    Returns one report per session, the baseline evaluation first. With
    ``out_dir`` every checkpoint, weight table, SHAP archive and the per-step
    metrics are written there.
    """
    expected = baseline.meta.get("baseline_hash")
    if expected is not None and expected != config.baseline_hash():
        raise ConfigError(f"checkpoint baseline hash {expected} does not match config {config.baseline_hash()}")
    s = config.splits.sessions
    if splits.sessions < s:
        raise DataError(f"config asks for {s} sessions, only {splits.sessions} evaluation sets available")
    arm = arm or config.weighting.method + ("+stab" if config.stability.enabled else "")
    n_classes = splits.n_classes
    cfg = retrain_config(config)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    model = baseline.eval()
    digest = checkpoint.param_digest(model)
    data = splits.main
    table = baseline_table(data.ids, data.origins)
    metrics = [(0, r) for r in baseline_steps]
    reports = [SessionReport(0, arm, config.seed, **evaluate(model, splits.test, n_classes),
                             weights=table.summary(), n_train=len(data), n_incremental=0,
                             init_digest=digest, best_digest=digest, best_epoch=baseline_epoch,
                             history=[], config_hash=config.hash())]
    if out_dir:
        checkpoint.save(model, os.path.join(out_dir, "session_0.srwm"))
        table.write_csv(os.path.join(out_dir, "weights_session_0.csv"))
    incremental_ids = []

    for i in range(1, s + 1):
        wrong = select_wrong(model, splits.evals[i - 1])
        log.info("[%s] session %d: %d/%d wrong", arm, i, len(wrong), wrong.n_evaluated)
        if len(wrong):
            delta, expl = session_deltas(config, model, wrong, splits, i, cache)
            inc = finalize_weights(wrong.dataset.ids, wrong.dataset.origins, np.ones(len(wrong), bool), delta,
                                   config.weighting.method, i, config.weighting.floor)
            table = table.extend(inc)
            data = RDIDataset.concat([data, wrong.dataset])
            incremental_ids.extend(wrong.dataset.ids.tolist())
            if out_dir and expl is not None:
                save_explanations(os.path.join(out_dir, f"shap_session_{i}.srws"), expl,
                                  {"session": i, "config_hash": config.hash()})
        table = replace(table, method=config.weighting.method, session=i)

        # accumulation audit
        expected_ids = set(splits.main.ids.tolist()) | set(incremental_ids)
        if set(data.ids.tolist()) != expected_ids or len(data) != len(expected_ids):
            raise AssertionError(f"session {i}: training set composition drifted")
        if not np.array_equal(table.sample_ids, data.ids):
            raise AssertionError(f"session {i}: weight table does not cover the training set")

        init_digest = checkpoint.param_digest(model)
        if init_digest != reports[-1].best_digest:
            raise AssertionError(f"session {i}: warm start differs from the previous best checkpoint")
        res = train(model, data.x, data.labels, table.weights, splits.valid.x, splits.valid.labels, cfg,
                    derive_seed(config.seed, "train", i), augment_config=config.augment,
                    sample_ids=data.ids, forbidden_ids=splits.test.ids)
        model = res.model
        model.meta = checkpoint_meta(config, splits, i)
        metrics.extend((i, r) for r in res.step_log)
        digest = checkpoint.param_digest(model)
        reports.append(SessionReport(i, arm, config.seed, **evaluate(model, splits.test, n_classes),
                                     weights=table.summary(), n_train=len(data), n_incremental=len(wrong),
                                     init_digest=init_digest, best_digest=digest, best_epoch=res.best_epoch,
                                     history=[list(h) for h in res.history], config_hash=config.hash()))
        log.info("[%s] session %d: accuracy %.4f", arm, i, reports[-1].accuracy)
        if out_dir:
            checkpoint.save(model, os.path.join(out_dir, f"session_{i}.srwm"))
            table.write_csv(os.path.join(out_dir, f"weights_session_{i}.csv"))

    if out_dir:
        write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
    return reports


@dataclass(frozen=True)
class Arm:
    method: str
    stability: bool = False

    @property
    def name(self):
        return self.method + ("+stab" if self.stability else "")

    @classmethod
    def parse(cls, text):
        method, _, flag = text.partition("+")
        if flag not in ("", "stab"):
            raise ConfigError(f"bad arm {text!r}; expected <method>[+stab]")
        return cls(METHOD_ALIASES.get(method, method), flag == "stab")


METHOD_ALIASES = {"masked": "masked_diff", "localize": "localize_diff"}


@dataclass
class MatrixResult:
    reports: list = field(default_factory=list)      # (repeat, SessionReport)
    summary: list = field(default_factory=list)      # (session, arm, n, mean, std)
    seconds: float = 0.0


PLOT_SCRIPT = '''"""Accuracy per session for each arm (mean +- std over repeats)."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "summary.csv"
series = defaultdict(list)
with open(path) as fh:
    for row in csv.DictReader(fh):
        series[row["arm"]].append((int(row["session"]), float(row["mean"]), float(row["std"])))
for arm, pts in sorted(series.items()):
    pts.sort()
    s, m, e = zip(*pts)
    plt.errorbar(s, m, yerr=e, marker="o", capsize=3, label=arm)
plt.xlabel("incremental session")
plt.ylabel("test accuracy")
plt.legend()
plt.savefig("accuracy.png", dpi=150)
'''


def summarize(rows):
    groups = {}
    for repeat, r in rows:
        groups.setdefault((r.session, r.arm), []).append(r.accuracy)
    out = []
    for (session, arm), accs in sorted(groups.items()):
        a = np.array(accs)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        out.append((session, arm, len(a), float(a.mean()), std))
    return out


def write_matrix_outputs(out_dir, result):
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["session", "arm", "repeat", "accuracy"])
        for repeat, r in result.reports:
            out.writerow([r.session, r.arm, repeat, repr(r.accuracy)])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["session", "arm", "n", "mean", "std"])
        for session, arm, n, mean, std in result.summary:
            out.writerow([session, arm, n, repr(mean), repr(std)])
    with open(os.path.join(out_dir, "plot_results.py"), "w") as fh:
        fh.write(PLOT_SCRIPT)


def run_experiment_matrix(config, arms, n_repeats, out_dir=None, splits=None, threads=1):
    """Every arm ``n_repeats`` times; repeat r uses seed derive_seed(config.seed, "repeat", r).

    Within a repeat all arms start from one baseline and share SHAP maps of
    that baseline, so arms differ only in their weights (and stability flag).
    """
    t0 = time.perf_counter()
    arms = [a if isinstance(a, Arm) else Arm.parse(a) for a in arms]
    if splits is None:
        splits = build_splits(config, threads)
    result = MatrixResult()
    for rep in range(n_repeats):
        rep_cfg = config.with_(seed=derive_seed(config.seed, "repeat", rep))
        base = train_baseline(rep_cfg, splits)
        log.info("repeat %d: baseline val %.4f (epoch %d, %.0fs)", rep, base.best_val_acc, base.best_epoch,
                 base.seconds)
        cache = ShapCache()
        for arm in arms:
            arm_cfg = rep_cfg.with_(weighting__method=arm.method, stability__enabled=arm.stability)
            arm_dir = os.path.join(out_dir, arm.name, f"repeat_{rep}") if out_dir else None
            reports = retrain_incremental(base.model, splits, arm_cfg, arm_dir, arm.name, cache,
                                          base.step_log, base.best_epoch)
            result.reports.extend((rep, r) for r in reports)
    result.summary = summarize(result.reports)
    result.seconds = time.perf_counter() - t0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_matrix_outputs(out_dir, result)
    return result
