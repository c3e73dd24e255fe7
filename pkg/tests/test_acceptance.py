"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The lines are collected into the terminal summary at the end of the run
(and shown inline with ``-s``). Criterion 7 trains the full experiment
matrix and takes a long time; set ``SRW_SKIP_MATRIX=1`` to skip it.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from srw import losses
from srw.augment import add_gaussian_noise, flip_doppler, shift_range
from srw.nn import backward, build_model, forward, ops, radar_descriptor, softmax, softmax_backward
from srw.pipeline.config import RunConfig
from srw.pipeline.data import build_splits
from srw.pipeline.run import run_experiment_matrix
from srw.pipeline.train import TrainConfig, loss_and_grads
from srw.radar import RadarConfig, TargetTrack, fft, macro_rdi, mti_filter, naive_dft, synthesize_if_frame
from srw.shap import partition_grid, shapley_exact, shapley_sampled
from srw.weighting import localize_difference, masked_difference, softmax_weight

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESULTS = []


def report(n, ok, detail, t0):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {time.perf_counter() - t0:.1f}s)"
    RESULTS.append(line)
    print("\n" + line)
    return ok


def random_mlp(rng, n_in, n_out=3, hidden=8):
    w1, b1 = rng.standard_normal((n_in, hidden)), rng.standard_normal(hidden)
    w2, b2 = rng.standard_normal((hidden, n_out)), rng.standard_normal(n_out)

    def f(batch):
        z = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
        return np.tanh(z @ w1 + b1) @ w2 + b2
    return f, w1


def flat(m):
    return partition_grid((1, m, 1), 1, 1)


def test_criterion_1_shapley_axioms():
    t0 = time.perf_counter()
    worst = {"efficiency": 0.0, "dummy": 0.0, "symmetry": 0.0, "linearity": 0.0}
    n_models = 0
    for seed in range(25):
        rng = np.random.default_rng(1000 + seed)
        m = int(rng.integers(2, 11))
        part = flat(m)
        x, bg = rng.standard_normal((1, m, 1)), rng.standard_normal((1, m, 1))
        f, w1 = random_mlp(rng, m)
        g, _ = random_mlp(rng, m)
        cls = [0, 1, 2]
        rf = shapley_exact(f, x, cls, part, bg)
        worst["efficiency"] = max(worst["efficiency"], np.abs(rf.efficiency_gap()).max())
        rg = shapley_exact(g, x, cls, part, bg)
        rs = shapley_exact(lambda b: f(b) + g(b), x, cls, part, bg)
        worst["linearity"] = max(worst["linearity"], np.abs(rs.values - rf.values - rg.values).max())
        j = int(rng.integers(m))
        w1[j] = 0      # f no longer reads feature j
        rd = shapley_exact(f, x, cls, part, bg)
        worst["dummy"] = max(worst["dummy"], np.abs(rd.values[:, j]).max())
        # features 0 and 1 made interchangeable: equal weights, equal x and background
        x[0, 1], bg[0, 1] = x[0, 0], bg[0, 0]
        w1[1] = w1[0]
        rsym = shapley_exact(f, x, cls, part, bg)
        worst["symmetry"] = max(worst["symmetry"], np.abs(rsym.values[:, 0] - rsym.values[:, 1]).max())
        n_models += 1
    ok = (worst["efficiency"] < 1e-6 and worst["dummy"] < 1e-9 and worst["symmetry"] < 1e-9
          and worst["linearity"] < 1e-9 and time.perf_counter() - t0 < 60)
    detail = f"{n_models} models, " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(1, ok, detail, t0)


def test_criterion_2_estimator_consistency():
    t0 = time.perf_counter()
    m, inside, total = 8, 0, 0
    for trial in range(20):
        rng = np.random.default_rng(2000 + trial)
        f, _ = random_mlp(rng, m)
        x, bg = rng.standard_normal((1, m, 1)), rng.standard_normal((1, m, 1))
        exact = shapley_exact(f, x, [0, 1], flat(m), bg)
        est = shapley_sampled(f, x, [0, 1], flat(m), bg, 2000, rng)
        inside += int((np.abs(est.values - exact.values) <= 3 * est.stderr).sum())
        total += exact.values.size
    frac = inside / total
    ok = frac >= 0.95 and time.perf_counter() - t0 < 120
    assert report(2, ok, f"{inside}/{total} = {frac:.3f} of features within 3 stderr", t0)


def _fd_error(f, flat, i, analytic, steps=(1e-5, 1e-6, 1e-7)):
    """Relative error of ``analytic`` against central differences.

    A larger step is retried smaller only when it fails: that happens when a
    ReLU or max-pool kink lies within the step. In smooth regions every step
    estimates the same true derivative, so a wrong gradient still fails.
    Returns (error, needed a finer step?).
    """
    for n, h in enumerate(steps):
        err = rel_err(analytic, numeric_grad(f, flat, i, h))
        if err < 1e-5:
            return err, n > 0
    return err, False


def _probe(f, arrays, grads, rng, n_total=60):
    """Spread ``n_total`` finite-difference probes over the inputs.

    Returns (worst relative error, probe count, probes that needed a finer step).
    """
    sizes = np.array([a.size for a in arrays], dtype=float)
    worst, count, kinks = 0.0, 0, 0
    for a, g, s in zip(arrays, grads, sizes):
        k = int(min(a.size, max(4, np.ceil(n_total * s / sizes.sum()))))
        flat, g_flat = a.reshape(-1), np.asarray(g).reshape(-1)
        for idx in rng.choice(a.size, size=k, replace=False):
            err, refined = _fd_error(f, flat, idx, g_flat[idx])
            worst = max(worst, err)
            kinks += refined
        count += k
    return worst, count, kinks


def _layer_checks(rng):
    out = {}
    x = rng.standard_normal((2, 6, 6, 3))
    w, b = rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
    y, cache = ops.conv2d_forward(x, w, b)
    r = rng.standard_normal(y.shape)
    out["conv2d"] = _probe(lambda: float((ops.conv2d_forward(x, w, b)[0] * r).sum()), [x, w, b],
                           ops.conv2d_backward(r, cache), rng)
    w2 = rng.standard_normal((2, 2, 3, 4))     # even kernel, as in the cross layers
    y, cache = ops.conv2d_forward(x, w2)
    r = rng.standard_normal(y.shape)
    out["conv2d_even"] = _probe(lambda: float((ops.conv2d_forward(x, w2)[0] * r).sum()), [x, w2],
                                ops.conv2d_backward(r, cache)[:2], rng)
    for train in (True, False):
        g, be = rng.standard_normal(3), rng.standard_normal(3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        y, cache = ops.batchnorm_forward(x, g, be, rm, rv, train)
        r = rng.standard_normal(y.shape)
        f = lambda: float((ops.batchnorm_forward(x, g, be, rm, rv, train)[0] * r).sum())
        out[f"batchnorm_{'train' if train else 'eval'}"] = _probe(f, [x, g, be], ops.batchnorm_backward(r, cache),
                                                                  rng)
    for name, fwd, bwd in (
        ("relu", ops.relu_forward, lambda r: ops.relu_backward(r, ops.relu_forward(x)[1])),
        ("maxpool2", ops.maxpool2_forward, lambda r: ops.maxpool2_backward(r, ops.maxpool2_forward(x)[1])),
        ("global_avg_pool", ops.gap_forward, lambda r: ops.gap_backward(r, x.shape)),
    ):
        r = rng.standard_normal(fwd(x)[0].shape)
        out[name] = _probe(lambda: float((fwd(x)[0] * r).sum()), [x], [bwd(r)], rng)
    a, wd, bd = rng.standard_normal((4, 6)), rng.standard_normal((6, 5)), rng.standard_normal(5)
    y, cache = ops.dense_forward(a, wd, bd)
    r = rng.standard_normal(y.shape)
    out["dense"] = _probe(lambda: float((ops.dense_forward(a, wd, bd)[0] * r).sum()), [a, wd, bd],
                          ops.dense_backward(r, cache), rng)
    z = rng.standard_normal((12, 5))
    r = rng.standard_normal(z.shape)
    out["softmax"] = _probe(lambda: float((softmax(z) * r).sum()), [z], [softmax_backward(r, softmax(z))], rng)
    # the dual-chain network as a whole, including the input
    desc = radar_descriptor(input_hw=(8, 8), widths=(2, 3, 4), embedding_dim=5, kernel=3)
    model = build_model(desc, 1, dtype=np.float64)
    xb = rng.standard_normal((3, 8, 8, 4))
    emb, logits, trace = forward(model, xb, need_input_grad=True)
    re, rl = rng.standard_normal(emb.shape), rng.standard_normal(logits.shape)
    grads, dx = backward(model, trace, re, rl)

    def f():
        e, lg, _ = forward(model, xb)
        return float((e * re).sum() + (lg * rl).sum())
    names = sorted(model.params)
    out["network"] = _probe(f, [model.params[k] for k in names] + [xb], [grads[k] for k in names] + [dx], rng,
                            n_total=120)
    return out


def _loss_checks(rng):
    out = {}
    emb = rng.standard_normal((12, 5))
    t = losses.mine_triplets(rng.integers(0, 4, 12), 4, rng, cap=60)
    out["lar"] = _probe(lambda: losses.lar_loss(emb, t)[0], [emb], [losses.lar_loss(emb, t)[1]], rng)
    a, b = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
    out["embedding_stability"] = _probe(lambda: losses.embedding_stability(a, b)[0], [a, b],
                                        losses.embedding_stability(a, b)[1], rng)
    p, q = softmax(rng.standard_normal((8, 4))), softmax(rng.standard_normal((8, 4)))
    for mode in ("cross_entropy", "kl"):
        out[f"classification_stability_{mode}"] = _probe(
            lambda: losses.classification_stability(p, q, mode)[0], [p, q],
            losses.classification_stability(p, q, mode)[1], rng)
    pw = softmax(rng.standard_normal((16, 4)))
    y, w = rng.integers(0, 4, 16), rng.uniform(0.05, 2, 16)
    out["weighted_cross_entropy"] = _probe(lambda: losses.weighted_cross_entropy(pw, y, w)[0], [pw],
                                           [losses.weighted_cross_entropy(pw, y, w)[1]], rng)
    # the composed objective, regular and stability mode, through the network
    desc = radar_descriptor(input_hw=(8, 8), widths=(2, 3, 4), embedding_dim=5, kernel=3)
    xb = rng.standard_normal((6, 8, 8, 4))
    yb, wb = np.array([0, 0, 1, 1, 2, 2]), rng.uniform(0.5, 1.5, 6)
    for name, cfg in (("total_regular", TrainConfig()),
                      ("total_stability", TrainConfig(stability=True, sigma=0.3))):
        model = build_model(desc, 2, dtype=np.float64)
        bd, (de, dl), trace = loss_and_grads(model, xb, yb, wb, np.random.default_rng(1), cfg)
        grads, _ = backward(model, trace, de, dl)
        f = lambda: loss_and_grads(model, xb, yb, wb, np.random.default_rng(1), cfg)[0].total
        names = sorted(model.params)
        out[name] = _probe(f, [model.params[k] for k in names], [grads[k] for k in names], rng, n_total=80)
    return out


def test_criterion_3_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    checks = {**_layer_checks(rng), **_loss_checks(rng)}
    worst = max(w for w, _, _ in checks.values())
    fewest = min(c for _, c, _ in checks.values())
    kinks = sum(k for _, _, k in checks.values())
    ok = worst < 1e-5 and fewest >= 50 and time.perf_counter() - t0 < 120
    assert report(3, ok, f"{len(checks)} layers/losses, worst rel err {worst:.1e}, >= {fewest} probes each, "
                         f"{kinks} probes refined near a kink", t0)


def test_criterion_4_radar_physics():
    t0 = time.perf_counter()
    cfg = RadarConfig()
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(4000 + trial)
        rb = int(rng.integers(2, 30))
        db = int(rng.choice(np.r_[-14:-1, 2:15]))
        tgt = TargetTrack(range=rb * cfg.range_resolution, velocity=db * cfg.velocity_resolution)
        rdi = np.abs(macro_rdi(mti_filter(synthesize_if_frame(cfg, [tgt], rng, snr_db=20))))
        d, r = np.unravel_index(rdi.argmax(), rdi.shape)
        hits += (r, d) == (rb, round(cfg.doppler_bin(tgt.velocity)))
    rng = np.random.default_rng(4)
    frame = rng.standard_normal((32, 64)) + 1j * rng.standard_normal((32, 64)) + 3
    mti_mean = np.abs(mti_filter(frame).mean(axis=0)).max()
    fft_err = 0.0
    for n in range(1, 65):
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        ref = naive_dft(v)
        fft_err = max(fft_err, np.abs(fft(v) - ref).max() / np.abs(ref).max())
    ok = hits >= 99 and mti_mean < 1e-6 and fft_err < 1e-6 and time.perf_counter() - t0 < 60
    assert report(4, ok, f"argmax {hits}/100, MTI mean {mti_mean:.1e}, FFT rel err {fft_err:.1e}", t0)


def test_criterion_5_augmentation():
    t0 = time.perf_counter()
    cfg = RadarConfig()
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 32, 4))
    involution = np.array_equal(flip_doppler(flip_doppler(x)), x)
    identity = np.array_equal(shift_range(x, 0), x)
    mirror = 0.0
    for db in range(1, 15):
        v = db * cfg.velocity_resolution
        minus = np.abs(macro_rdi(mti_filter(synthesize_if_frame(cfg, [TargetTrack(2.0, -v)], rng))))
        plus = np.abs(macro_rdi(mti_filter(synthesize_if_frame(cfg, [TargetTrack(2.0, v)], rng))))
        mirror = max(mirror, np.abs(flip_doppler(minus[..., None])[..., 0] - plus).max())
    noise = add_gaussian_noise(np.zeros(10_000), 0.01, rng)
    std_err = abs(noise.std() / 0.01 - 1)
    ok = involution and identity and mirror < 1e-5 and std_err < 0.05 and time.perf_counter() - t0 < 60
    assert report(5, ok, f"involution {involution}, shift(0) {identity}, -v/+v max diff {mirror:.1e}, "
                         f"noise std off by {100 * std_err:.1f}%", t0)


def test_criterion_6_weighting_formulas():
    t0 = time.perf_counter()
    mp = np.array([[0.2, -0.1], [0.3, 0.0]])
    mt = np.array([[0.1, 0.5], [-0.2, 0.0]])
    sw = softmax_weight([0.3, 0.6, 0.1], 1, 0)
    md, ld = masked_difference(mp, mt), localize_difference(mp, mt)
    rng = np.random.default_rng(6)
    bounded = True
    for _ in range(10_000):
        p = softmax(rng.standard_normal(int(rng.integers(2, 10))) * rng.uniform(0.1, 10))
        yl = int(rng.integers(len(p)))
        w = softmax_weight(p, int(p.argmax()), yl)
        bounded &= 1.0 <= w <= 2.0
    ok = abs(sw - 1.3) < 1e-12 and abs(md - 0.3) < 1e-12 and abs(ld) < 1e-12 and bounded
    assert report(6, ok, f"softmax {sw:.12g}, masked {md:.12g}, localize {ld:.3g}, "
                         f"bounded over 1e4 draws {bounded}", t0)


def _mechanics_ok(result, splits):
    """Accumulation and warm-start audits on every run of a matrix."""
    runs = {}
    for rep, r in result.reports:
        runs.setdefault((rep, r.arm), []).append(r)
    for reports in runs.values():
        n = len(splits.main)
        for prev, cur in zip(reports, reports[1:]):
            n += cur.n_incremental
            if cur.n_train != n or cur.init_digest != prev.best_digest:
                return False
    return True


@pytest.mark.skipif(os.environ.get("SRW_SKIP_MATRIX") == "1", reason="SRW_SKIP_MATRIX=1")
def test_criterion_7_end_to_end(tmp_path):
    t0 = time.perf_counter()
    config = RunConfig.load(os.path.join(ROOT, "configs", "desk_radar.json"))
    splits = build_splits(config)
    result = run_experiment_matrix(config, ["none", "masked_diff", "localize_diff"], 3, tmp_path, splits)
    seconds = time.perf_counter() - t0
    final = {arm: mean for s, arm, n, mean, std in result.summary if s == config.splits.sessions}
    spread = {arm: std for s, arm, n, mean, std in result.summary if s == config.splits.sessions}
    margin = {arm: final[arm] - final["none"] for arm in ("masked_diff", "localize_diff")}
    mechanics = _mechanics_ok(result, splits)
    with open(os.path.join(ROOT, "acceptance_matrix.json"), "w") as fh:
        json.dump({"summary": result.summary, "seconds": seconds}, fh, indent=2)
    ok = all(v >= -0.005 for v in margin.values()) and seconds < 1800 and mechanics
    detail = ", ".join(f"{a} {100 * final[a]:.2f}+-{100 * spread[a]:.2f}%" for a in final)
    detail += f"; masked-none {100 * margin['masked_diff']:+.2f}pp, localize-none "
    detail += f"{100 * margin['localize_diff']:+.2f}pp; mechanics {mechanics}"
    assert report(7, ok, detail, t0)


SMALL = {
    "splits": {"main": 240, "valid": 60, "test": 90, "eval": 60, "sessions": 2},
    "model": {"widths": [4, 8, 8], "embedding_dim": 8, "kernel": 3},
    "train": {"epochs": 2, "patience": 2},
    "retrain": {"epochs": 2, "patience": 2},
    "shap": {"n_permutations": 3, "block": [16, 16]},
}


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    config = RunConfig.from_dict(SMALL)
    arms = ["masked_diff", "softmax+stab"]
    digests = []
    for run in ("a", "b"):
        splits = build_splits(config)      # rebuilt: data generation is part of the run
        run_experiment_matrix(config, arms, 1, tmp_path / run, splits)
        files = sorted(p.relative_to(tmp_path / run) for p in (tmp_path / run).rglob("*.csv"))
        digests.append({str(f): hashlib.sha256((tmp_path / run / f).read_bytes()).hexdigest() for f in files})
    same = digests[0] == digests[1] and len(digests[0]) > 0
    assert report(8, same, f"{len(digests[0])} CSV files byte-identical across two runs: {same}", t0)


def test_criterion_9_stability_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    desc = radar_descriptor(input_hw=(8, 8), widths=(2, 3, 4), embedding_dim=5, kernel=3)
    model = build_model(desc, 9, dtype=np.float64)
    x = rng.standard_normal((18, 8, 8, 4))
    y = np.repeat([0, 1, 2], 6)
    w = rng.uniform(0.5, 1.5, 18)
    reg = loss_and_grads(model, x, y, w, np.random.default_rng(1), TrainConfig())[0]
    stab = loss_and_grads(model, x, y, w, np.random.default_rng(1), TrainConfig(stability=True, sigma=0.0))[0]
    _, logits, _ = forward(model, x)
    h = losses.entropy(softmax(logits))
    gap = abs(stab.total - (reg.total + h))
    ok = stab.lstable_emb == 0 and gap < 1e-6
    assert report(9, ok, f"Lstable_emb {stab.lstable_emb:.1e}, |total - (regular + entropy)| {gap:.1e}", t0)


@pytest.mark.skipif(not os.environ.get("SRW_CIFAR_DIR"), reason="optional: set SRW_CIFAR_DIR to the CIFAR-10 "
                    "binary batches to run")
def test_criterion_10_cifar_stretch(tmp_path):
    t0 = time.perf_counter()
    config = RunConfig.from_dict({"source": "image-files", "image": {"path": os.environ["SRW_CIFAR_DIR"]},
                                  "splits": {"sessions": 4}, "train": {"epochs": 10, "patience": 3},
                                  "retrain": {"epochs": 5, "patience": 2}})
    result = run_experiment_matrix(config, ["none", "masked_diff", "localize_diff"], 1, tmp_path)
    final = {arm: mean for s, arm, n, mean, std in result.summary if s == 4}
    ok = final["masked_diff"] >= final["none"] and final["localize_diff"] >= final["none"]
    assert report(10, ok, ", ".join(f"{a} {100 * v:.2f}%" for a, v in final.items()), t0)
