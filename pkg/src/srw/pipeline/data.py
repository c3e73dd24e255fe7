"""Dataset splits for both sources: the radar simulator and CIFAR-style binaries."""

import glob
import json
import os
from dataclasses import dataclass, field

import numpy as np

from srw.binfmt import FormatError, file_sha256, load_dataset, save_dataset
from srw.radar import (ORIGIN_MAIN, ORIGIN_TEST, ORIGIN_VALID, ChannelStats, RDIDataset,
                       generate_dataset, origin_eval)

CIFAR_RECORD = 1 + 32 * 32 * 3


class DataError(ValueError):
    pass


@dataclass
class DatasetSplits:
    """D^m, D^v, D^t and one evaluation set per incremental session.

    All tensors are normalized with ``stats`` (fitted on D^m).
    """

    main: RDIDataset
    valid: RDIDataset
    test: RDIDataset
    evals: list = field(default_factory=list)
    stats: ChannelStats = None
    n_classes: int = 3

    @property
    def sessions(self):
        return len(self.evals)

    def all_parts(self):
        return [self.main, self.valid, self.test, *self.evals]

    def check_disjoint(self):
        seen = set()
        for part in self.all_parts():
            ids = set(part.ids.tolist())
            if len(ids) != len(part) or ids & seen:
                raise DataError("splits share sample ids")
            seen |= ids


def _split_seed(data_seed, k):
    return int(np.random.SeedSequence([int(data_seed), int(k)]).generate_state(1)[0])


def radar_splits(config, threads=1):
    """Simulated splits; each split has its own seed and id range."""
    sp = config.splits
    sizes = [(sp.main, ORIGIN_MAIN), (sp.valid, ORIGIN_VALID), (sp.test, ORIGIN_TEST)]
    sizes += [(sp.eval, origin_eval(i + 1)) for i in range(sp.sessions)]
    parts, offset = [], 0
    for k, (n, origin) in enumerate(sizes):
        parts.append(generate_dataset(config.radar, config.scene, n, _split_seed(config.data_seed, k),
                                      origin=origin, id_offset=offset, threads=threads))
        offset += n
    stats = ChannelStats.fit(parts[0].x)
    parts = [p.with_x(stats.normalize(p.x)) for p in parts]
    splits = DatasetSplits(parts[0], parts[1], parts[2], parts[3:], stats, config.scene.n_classes)
    splits.check_disjoint()
    return splits


def read_cifar_batch(path):
    """One CIFAR-10 binary batch -> (uint8 images (N, 32, 32, 3), int64 labels)."""
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} out of range")
    # channel-planar, row-major -> NHWC
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def image_splits(config):
    """Baseline / validation / incremental subsets from ``data_batch_*.bin``, test from ``test_batch.bin``."""
    src = config.image
    train_files = sorted(glob.glob(os.path.join(src.path, "data_batch_*.bin")))
    test_file = os.path.join(src.path, "test_batch.bin")
    if not train_files or not os.path.exists(test_file):
        raise DataError(f"no CIFAR-10 binary batches under {src.path!r}")
    xs, ys = zip(*(read_cifar_batch(f) for f in train_files))
    x, y = np.concatenate(xs), np.concatenate(ys)
    xt, yt = read_cifar_batch(test_file)
    sessions = config.splits.sessions
    need = src.baseline + src.valid + sessions * src.increment
    if need > len(x) or src.test > len(xt):
        raise DataError(f"requested {need} training images, {len(x)} available")
    order = np.random.default_rng(_split_seed(config.data_seed, 0)).permutation(len(x))
    bounds = np.cumsum([0, src.baseline, src.valid] + [src.increment] * sessions)
    origins = [ORIGIN_MAIN, ORIGIN_VALID] + [origin_eval(i + 1) for i in range(sessions)]
    parts = []
    for (a, b), origin in zip(zip(bounds[:-1], bounds[1:]), origins):
        idx = order[a:b]
        parts.append(RDIDataset(x[idx] / np.float32(255), y[idx], idx.astype(np.uint64),
                                np.full(len(idx), origin, np.uint8)))
    test = RDIDataset(xt[:src.test] / np.float32(255), yt[:src.test],
                      np.arange(src.test, dtype=np.uint64) + np.uint64(len(x)),
                      np.full(src.test, ORIGIN_TEST, np.uint8))
    stats = ChannelStats.fit(parts[0].x)
    main, valid, *evals = [p.with_x(stats.normalize(p.x)) for p in parts]
    splits = DatasetSplits(main, valid, test.with_x(stats.normalize(test.x)), evals, stats, 10)
    splits.check_disjoint()
    return splits


def build_splits(config, threads=1):
    if config.source == "radar-sim":
        return radar_splits(config, threads)
    return image_splits(config)


def split_names(n_sessions):
    return ["main", "valid", "test"] + [f"eval_{i + 1}" for i in range(n_sessions)]


def save_splits(directory, splits, header=None):
    """One ``<name>.srwd`` file per split plus ``stats.json``; returns {file: sha256}."""
    os.makedirs(directory, exist_ok=True)
    hashes = {}
    for name, part in zip(split_names(splits.sessions), splits.all_parts()):
        path = os.path.join(directory, f"{name}.srwd")
        save_dataset(path, part, dict(header or {}, split=name, n_classes=splits.n_classes))
        hashes[os.path.basename(path)] = file_sha256(path)
    with open(os.path.join(directory, "stats.json"), "w") as fh:
        json.dump({"mean": list(splits.stats.mean), "std": list(splits.stats.std),
                   "n_classes": splits.n_classes, "sessions": splits.sessions}, fh, indent=2)
    return hashes


def load_splits(directory):
    path = os.path.join(directory, "stats.json")
    if not os.path.exists(path):
        raise DataError(f"{path}: not found (run 'simulate' first)")
    with open(path) as fh:
        meta = json.load(fh)
    parts = []
    for name in split_names(meta["sessions"]):
        f = os.path.join(directory, f"{name}.srwd")
        if not os.path.exists(f):
            raise DataError(f"{f}: missing split")
        try:
            parts.append(load_dataset(f)[1])
        except FormatError as exc:
            raise DataError(str(exc)) from exc
    stats = ChannelStats(tuple(meta["mean"]), tuple(meta["std"]))
    return DatasetSplits(parts[0], parts[1], parts[2], parts[3:], stats, meta["n_classes"])
