"""One incremental session by hand: baseline, wrong samples, SHAP weights, weighted retraining.

Uses a deliberately small configuration so it finishes in about a minute.
Run: python3 demos/reweighting_session.py
"""

import numpy as np

from srw.pipeline.config import RunConfig
from srw.pipeline.data import build_splits
from srw.pipeline.run import evaluate, select_wrong, session_deltas, train_baseline
from srw.pipeline.train import TrainConfig, train
from srw.weighting import finalize_weights

config = RunConfig.from_dict({
    "splits": {"main": 900, "valid": 150, "test": 300, "eval": 300, "sessions": 1},
    "model": {"widths": [4, 8, 8], "embedding_dim": 8, "kernel": 3},
    "train": {"epochs": 6, "patience": 3},
    "weighting": {"method": "localize_diff"},
    "shap": {"n_permutations": 4, "block": [16, 16]},
})
splits = build_splits(config)
base = train_baseline(config, splits)
print(f"baseline test accuracy {evaluate(base.model, splits.test, 3)['accuracy']:.3f}")

# evaluation samples the baseline gets wrong
wrong = select_wrong(base.model, splits.evals[0])
print(f"{len(wrong)} of {wrong.n_evaluated} evaluation samples misclassified")

# SHAP maps for (true, predicted) class; weight = 1 + sum(pred map - true map)
delta, expl = session_deltas(config, base.model, wrong, splits, 1)
table = finalize_weights(wrong.dataset.ids, wrong.dataset.origins, np.ones(len(wrong), bool), delta,
                         config.weighting.method, 1)
print(f"weights: min {table.weights.min():.3f} mean {table.weights.mean():.3f} max {table.weights.max():.3f}")
for e, w in list(zip(expl, table.weights))[:3]:
    print(f"  sample {e.sample_id}: true {e.result.classes[0]}, predicted {e.result.classes[1]}, weight {w:.3f}")

# retrain on baseline data plus the wrong set, baseline samples at weight 1
x = np.concatenate([splits.main.x, wrong.dataset.x])
y = np.concatenate([splits.main.labels, wrong.dataset.labels])
w = np.concatenate([np.ones(len(splits.main)), table.weights])
res = train(base.model, x, y, w, splits.valid.x, splits.valid.labels, TrainConfig(epochs=3, patience=2), 1)
print(f"after weighted retraining: test accuracy {evaluate(res.model, splits.test, 3)['accuracy']:.3f}")
