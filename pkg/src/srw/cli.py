"""Command-line entry point: ``srw <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
Environment: SRW_SEED overrides the config seed, SRW_THREADS overrides
``--threads``. Relative paths resolve against ``--workdir``.
"""

import argparse
import json
import logging
import os
import platform
import sys

import numpy as np

import srw
from srw.binfmt import FormatError, file_sha256, load_dataset, save_explanations
from srw.nn import ShapeError, checkpoint
from srw.pipeline import run
from srw.pipeline.config import ConfigError, RunConfig
from srw.pipeline.data import DataError, DatasetSplits, build_splits, load_splits, save_splits
from srw.pipeline.train import NumericalError
from srw.radar import AmbiguityError, InfeasibleSceneError

log = logging.getLogger("srw")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ConfigError, DataError, FormatError, checkpoint.CheckpointError, ShapeError,
               InfeasibleSceneError, AmbiguityError, FileNotFoundError, IsADirectoryError)
METHOD_CHOICES = {"none": "none", "softmax": "softmax", "masked": "masked_diff", "localize": "localize_diff",
                  "masked_diff": "masked_diff", "localize_diff": "localize_diff"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common(p):
    p.add_argument("--config", help="run config JSON (defaults used when omitted)")
    p.add_argument("--workdir", default=".", help="base directory for relative paths (default: .)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for sample-parallel stages (default: available cores)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity (default: INFO)")


def build_parser():
    parser = Parser(prog="srw", description="SHAP-driven sample reweighting for incremental retraining.")
    parser.add_argument("--version", action="version", version=f"srw {srw.__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="synthesize radar splits and write them as .srwd files")
    _common(p)
    p.add_argument("--out", default="data", help="output directory (default: data)")

    p = sub.add_parser("train-baseline", help="train the baseline model on the main split")
    _common(p)
    p.add_argument("--data", help="split directory from 'simulate' (built from config when omitted)")
    p.add_argument("--out", default="baseline", help="output directory (default: baseline)")

    p = sub.add_parser("retrain", help="run the incremental retraining sessions")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="baseline checkpoint (.srwm)")
    p.add_argument("--data", help="split directory from 'simulate'")
    p.add_argument("--method", choices=["none", "softmax", "masked", "localize"], default=None,
                   help="weighting method (default: from config)")
    p.add_argument("--stability", action="store_true", help="enable stability training")
    p.add_argument("--sigma", type=float, default=None, help="stability noise std (default: from config)")
    p.add_argument("--out", default="retrain", help="output directory (default: retrain)")

    p = sub.add_parser("explain", help="SHAP map pairs for the samples a checkpoint misclassifies")
    _common(p)
    p.add_argument("--checkpoint", "--model", dest="checkpoint", required=True, help="model checkpoint (.srwm)")
    p.add_argument("--data", help="split directory from 'simulate', or a single .srwd file")
    p.add_argument("--split", default="eval_1", help="split to explain when --data is a directory (default: eval_1)")
    p.add_argument("--mode", choices=["exact", "sampled"], default=None, help="estimator (default: from config)")
    p.add_argument("--perms", type=int, default=None, help="permutations in sampled mode (default: from config)")
    p.add_argument("--limit", type=int, default=None, help="explain at most this many samples")
    p.add_argument("--out", default="explanations.srws", help="output archive (default: explanations.srws)")

    p = sub.add_parser("evaluate", help="accuracy and confusion matrix of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.srwm)")
    p.add_argument("--data", help="split directory from 'simulate'")
    p.add_argument("--split", default="test", help="split to evaluate (default: test)")
    p.add_argument("--out", default=None, help="write the report JSON here as well as to stdout")

    p = sub.add_parser("report", help="aggregate run directories into results/summary CSVs and a plot script")
    _common(p)
    p.add_argument("runs", nargs="+", help="directories containing report.json (searched recursively)")
    p.add_argument("--out", default="report", help="output directory (default: report)")

    p = sub.add_parser("experiment", help="run the arm x repeat matrix end to end")
    _common(p)
    p.add_argument("--arms", default="none,masked,localize",
                   help="comma-separated arms, each <method>[+stab] (default: none,masked,localize)")
    p.add_argument("--repeats", type=int, default=3, help="repeats per arm (default: 3)")
    p.add_argument("--out", default="experiment", help="output directory (default: experiment)")
    return parser


class Context:
    def __init__(self, args, env, argv=()):
        self.args = args
        self.argv = list(argv)
        self.workdir = os.path.abspath(args.workdir)
        threads = env.get("SRW_THREADS")
        self.threads = int(threads) if threads else (args.threads or os.cpu_count() or 1)
        self.inputs = {}
        cfg = RunConfig.load(self.path(args.config)) if args.config else RunConfig()
        if args.config:
            self.inputs[args.config] = file_sha256(self.path(args.config))
        if args.seed is not None:
            cfg = cfg.with_(seed=args.seed)
        if env.get("SRW_SEED"):
            cfg = cfg.with_(seed=int(env["SRW_SEED"]))
        self.config = cfg

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.workdir, p)

    def splits(self):
        if getattr(self.args, "data", None):
            d = self.path(self.args.data)
            for name in sorted(os.listdir(d)) if os.path.isdir(d) else []:
                self.inputs[os.path.join(self.args.data, name)] = file_sha256(os.path.join(d, name))
            return load_splits(d)
        return build_splits(self.config, self.threads)

    def load_checkpoint(self, p):
        full = self.path(p)
        if not os.path.exists(full):
            raise DataError(f"checkpoint not found: {full}")
        self.inputs[p] = file_sha256(full)
        return checkpoint.load(full)

    def manifest(self, out_dir, outputs=None):
        os.makedirs(out_dir, exist_ok=True)
        doc = {
            "command": self.args.command,
            "argv": self.argv,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "baseline_hash": self.config.baseline_hash(),
            "seeds": {"seed": self.config.seed, "data_seed": self.config.data_seed},
            "inputs": self.inputs,
            "outputs": outputs or {},
            "versions": {"srw": srw.__version__, "numpy": np.__version__, "python": platform.python_version()},
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


def cmd_simulate(ctx):
    if ctx.config.source != "radar-sim":
        raise ConfigError("simulate needs source 'radar-sim'")
    out = ctx.path(ctx.args.out)
    splits = build_splits(ctx.config, ctx.threads)
    hashes = save_splits(out, splits, {"config_hash": ctx.config.hash()})
    ctx.manifest(out, hashes)
    print(f"wrote {sum(len(p) for p in splits.all_parts())} samples to {out}")


def cmd_train_baseline(ctx):
    splits = ctx.splits()
    out = ctx.path(ctx.args.out)
    os.makedirs(out, exist_ok=True)
    res = run.train_baseline(ctx.config, splits)
    path = os.path.join(out, "baseline.srwm")
    digest = checkpoint.save(res.model, path)
    run.write_metrics(os.path.join(out, "metrics.csv"), [(0, r) for r in res.step_log])
    report = run.evaluate(res.model, splits.test, splits.n_classes)
    report.update(best_epoch=res.best_epoch, best_val_acc=res.best_val_acc)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    ctx.manifest(out, {"baseline.srwm": digest})
    print(f"baseline test accuracy {report['accuracy']:.4f} -> {path}")


def cmd_retrain(ctx):
    a = ctx.args
    cfg = ctx.config
    if a.method:
        cfg = cfg.with_(weighting__method=METHOD_CHOICES[a.method])
    if a.stability:
        cfg = cfg.with_(stability__enabled=True)
    if a.sigma is not None:
        cfg = cfg.with_(stability__sigma=a.sigma)
    ctx.config = cfg
    model = ctx.load_checkpoint(a.checkpoint)
    splits = ctx.splits()
    out = ctx.path(a.out)
    reports = run.retrain_incremental(model, splits, cfg, out)
    ctx.manifest(out)
    for r in reports:
        print(f"session {r.session}: accuracy {r.accuracy:.4f} (n_train {r.n_train})")


def _split_by_name(splits, name):
    table = {"main": splits.main, "valid": splits.valid, "test": splits.test}
    table.update({f"eval_{i + 1}": e for i, e in enumerate(splits.evals)})
    if name not in table:
        raise DataError(f"unknown split {name!r}; available: {sorted(table)}")
    return table[name]


def cmd_explain(ctx):
    a = ctx.args
    if a.mode:
        ctx.config = ctx.config.with_(shap__mode=a.mode)
    if a.perms is not None:
        ctx.config = ctx.config.with_(shap__n_permutations=a.perms)
    model = ctx.load_checkpoint(a.checkpoint)
    if a.data and os.path.isfile(ctx.path(a.data)):
        # a lone dataset file: it doubles as the background reference
        ctx.inputs[a.data] = file_sha256(ctx.path(a.data))
        try:
            ds = load_dataset(ctx.path(a.data))[1]
        except FormatError as exc:
            raise DataError(str(exc)) from exc
        splits = DatasetSplits(ds, ds, ds, [], None, model.n_classes)
        target = ds
    else:
        splits = ctx.splits()
        target = _split_by_name(splits, a.split)
    wrong = run.select_wrong(model, target)
    if a.limit is not None:
        wrong = run.WrongSet(wrong.dataset.subset(np.arange(min(a.limit, len(wrong)))),
                             wrong.predicted[:a.limit], wrong.probabilities[:a.limit], wrong.n_evaluated)
    partition, background = run.shap_setup(ctx.config, splits)
    expl = run.ShapCache().get_or_compute(model, wrong, ctx.config.shap, partition, background,
                                          run.derive_seed(ctx.config.seed, "shap", 0)) if len(wrong) else []
    out = ctx.path(a.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_explanations(out, expl, {"split": a.split, "config_hash": ctx.config.hash(),
                                  "map_shape": [splits.main.x.shape[3], *splits.main.x.shape[1:3]]})
    ctx.manifest(os.path.dirname(out) or ".", {os.path.basename(out): file_sha256(out)})
    print(f"explained {len(expl)} misclassified samples -> {out}")


def cmd_evaluate(ctx):
    a = ctx.args
    model = ctx.load_checkpoint(a.checkpoint)
    splits = ctx.splits()
    report = run.evaluate(model, _split_by_name(splits, a.split), splits.n_classes)
    text = json.dumps(report, indent=2)
    print(text)
    if a.out:
        out = ctx.path(a.out)
        with open(out, "w") as fh:
            fh.write(text + "\n")
        ctx.manifest(os.path.dirname(out) or ".")


def cmd_report(ctx):
    rows = []
    for run_dir in ctx.args.runs:
        found = []
        for root, _, files in os.walk(ctx.path(run_dir)):
            if "report.json" in files:
                found.append(os.path.join(root, "report.json"))
        if not found:
            raise DataError(f"no report.json under {ctx.path(run_dir)}")
        for path in sorted(found):
            ctx.inputs[path] = file_sha256(path)
            with open(path) as fh:
                reports = json.load(fh)
            if not isinstance(reports, list):
                continue
            for r in reports:
                rows.append((r["seed"], run.SessionReport(**r)))
    seeds = sorted({seed for seed, _ in rows})
    result = run.MatrixResult([(seeds.index(seed), r) for seed, r in rows])
    result.summary = run.summarize(result.reports)
    out = ctx.path(ctx.args.out)
    os.makedirs(out, exist_ok=True)
    run.write_matrix_outputs(out, result)
    ctx.manifest(out)
    for session, arm, n, mean, std in result.summary:
        print(f"session {session} {arm:16s} n={n} accuracy {mean:.4f} +- {std:.4f}")


def cmd_experiment(ctx):
    arms = [a.strip() for a in ctx.args.arms.split(",") if a.strip()]
    out = ctx.path(ctx.args.out)
    result = run.run_experiment_matrix(ctx.config, arms, ctx.args.repeats, out, threads=ctx.threads)
    ctx.manifest(out)
    for session, arm, n, mean, std in result.summary:
        print(f"session {session} {arm:16s} n={n} accuracy {mean:.4f} +- {std:.4f}")
    print(f"{result.seconds:.0f}s")


COMMANDS = {
    "simulate": cmd_simulate,
    "train-baseline": cmd_train_baseline,
    "retrain": cmd_retrain,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "experiment": cmd_experiment,
}


def main(argv=None, env=None):
    env = os.environ if env is None else env
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:      # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        ctx = Context(args, env, argv)
        log.info("srw %s numpy %s config %s seed %d", srw.__version__, np.__version__, ctx.config.hash(),
                 ctx.config.seed)
        COMMANDS[args.command](ctx)
    except NumericalError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ValueError as exc:
        # bad env values and similar input problems
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
