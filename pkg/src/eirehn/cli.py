"""``eirehn`` command-line entry point.

Subcommands: ``synth-gen``, ``train``, ``eval``, ``verify``, ``report``.
Any flag can also come from ``--config FILE`` (``key = value`` lines, ``#``
comments, keys spelled like the flag with or without dashes); flags given
on the command line win.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (divergence or a failed verification suite).
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cells, datasets, synthgen, verify
from . import train as training
from .cells import CELL_KINDS, Cell
from .ndcore import Rng
from .errors import ConfigError, DataError, EirehnError, NumericalError

TASKS = ("synthetic", "har", "lm-toy")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# per-task training defaults (batch size, epochs, learning rate, clip norm)
TASK_DEFAULTS = {
    "synthetic": dict(batch_size=20, epochs=100, lr=0.01, clip_norm=None),
    "har": dict(batch_size=200, epochs=100, lr=0.0025, clip_norm=None),
    "lm-toy": dict(batch_size=20, epochs=10, lr=0.01, clip_norm=10.0),
}


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    task: str = "synthetic"
    cell: str = "eirehn"
    d_h: int = 20
    d_z: int | None = None
    layers: int = 1
    r: int = 1
    r_max: int = 10
    alpha_hat_init: float = -2.0
    beta_hat_init: float = 2.0
    gate_bias_init: float = -4.0
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    out: str = "."
    # data sources
    data: str | None = None
    n: int = 10000
    t: int = 21
    data_r_max: int = 10
    theta: float = math.pi / 6
    noise_sigma: float = 0.1
    har_root: str | None = None
    val_size: int | None = None
    bptt: int = 35
    corpus_length: int = 100_000

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell {self.cell!r}; expected one of {CELL_KINDS}")
        dims = dict(d_h=self.d_h, layers=self.layers, r=self.r, r_max=self.r_max, n=self.n,
                    data_r_max=self.data_r_max, bptt=self.bptt, corpus_length=self.corpus_length)
        if self.d_z is not None:
            dims["d_z"] = self.d_z
        bad = [k for k, v in dims.items() if v < 1]
        if bad:
            raise ConfigError(f"dimensions must be positive: {', '.join(bad)}")
        if self.r != 1 and self.cell not in ("rhn", "srhn"):
            raise ConfigError("--r (fixed depth) only applies to rhn and srhn; use --r-max for adaptive cells")
        if self.task == "synthetic" and self.data is None and self.t < 2:
            raise ConfigError("synthetic regression needs sequences of length T >= 2")
        self.train.validate()
        return self

    def run_name(self):
        depth = f"-r{self.r}" if self.cell in ("rhn", "srhn") else ""
        return f"{self.task}-{self.cell}{depth}-h{self.d_h}x{self.layers}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train"] = training.TrainConfig(**d["train"])
        return cls(**d)


# -- data and models ----------------------------------------------------------------


@dataclass
class TaskData:
    train: dict
    val: dict
    test: dict
    D_x: int
    vocab_size: int | None = None
    baseline: dict = field(default_factory=dict)


def load_task_data(spec: ExperimentSpec) -> TaskData:
    if spec.task == "synthetic":
        if spec.data:
            ds = synthgen.load_text(spec.data)
        else:
            ds = synthgen.generate(synthgen.SynthConfig(
                N=spec.n, T=spec.t, R_max=spec.data_r_max, theta=spec.theta,
                noise_sigma=spec.noise_sigma, seed=spec.train.seed))
        parts = synthgen.split(ds, synthgen.proportional_sizes(len(ds)))
        splits = []
        for part in parts:
            x, y = synthgen.regression_pairs(part.xs)
            splits.append(dict(x=x, y=y))
        return TaskData(*splits, D_x=2)
    if spec.task == "har":
        if not spec.har_root:
            raise DataError("the har task needs --har-root pointing at the 'UCI HAR Dataset' directory "
                            "(download: UCI Machine Learning Repository, 'Human Activity Recognition Using Smartphones')")
        har = datasets.load_har(spec.har_root)
        n_val = spec.val_size if spec.val_size is not None else len(har.y_train) // 10
        tr_, va, te = datasets.har_validation_split(har, n_val, seed=spec.train.seed)
        return TaskData(tr_, va, te, D_x=len(datasets.HAR_CHANNELS))
    corpus = datasets.toy_corpus(seed=spec.train.seed, length=spec.corpus_length)
    V = len(corpus.vocab)
    win = [datasets.lm_windows(ids, spec.bptt) for ids in (corpus.train, corpus.valid, corpus.test)]
    base = {"unigram_perplexity_val": datasets.unigram_perplexity(corpus.train, corpus.valid, V),
            "unigram_perplexity_test": datasets.unigram_perplexity(corpus.train, corpus.test, V)}
    return TaskData(*win, D_x=spec.d_h, vocab_size=V, baseline=base)


def build_model(spec: ExperimentSpec, data: TaskData):
    layers = []
    for i in range(spec.layers):
        layers.append(Cell(
            spec.cell, spec.d_h, data.D_x if i == 0 else spec.d_h, depth=spec.r, R_max=spec.r_max,
            D_z=spec.d_z, alpha_hat_init=spec.alpha_hat_init, beta_hat_init=spec.beta_hat_init,
            gate_bias_init=spec.gate_bias_init))
    if spec.task == "synthetic":
        return training.SequenceRegressor(layers, 2)
    if spec.task == "har":
        return datasets.SequenceClassifier(layers, datasets.HAR_CLASSES)
    return datasets.TiedLanguageModel(layers, data.vocab_size)


def _run_seed(spec_dict, seed, data=None):
    spec = ExperimentSpec.from_dict(spec_dict)
    base_seed = spec.train.seed
    if data is None:
        data = load_task_data(spec)
    spec.train.seed = seed
    model = build_model(spec, data)
    result = training.train_epochs(model, data.train, data.val, spec.train, run=spec.run_name(), test=data.test)
    meta = {"spec": spec_dict, "seed": seed, "base_seed": base_seed, "best_epoch": result.best_epoch,
            "parameters": model.count_parameters(result.best_params)}
    return result.records, result.best_params, meta, data.baseline


def run_training(spec: ExperimentSpec, seeds: int = 1, jobs: int = 1, jsonl=False, echo=print):
    """Train ``seeds`` runs (seeds ``seed, seed+1, ...``) and write per-run files plus a summary."""
    spec.validate()
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    run = spec.run_name()
    seed_list = [spec.train.seed + i for i in range(seeds)]
    spec_dict = spec.to_dict()
    if jobs > 1 and seeds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed, [spec_dict] * seeds, seed_list))
    else:
        data = load_task_data(spec)
        results = [_run_seed(spec_dict, s, data) for s in seed_list]
    all_records = []
    for seed, (records, params, meta, baseline) in zip(seed_list, results):
        stem = out / f"{run}-seed{seed}"
        training.write_metrics_csv(records, stem.with_suffix(".csv"))
        if jsonl:
            training.write_metrics_jsonl(records, stem.with_suffix(".jsonl"))
        meta["baseline"] = baseline
        cells.save_checkpoint(stem.with_suffix(".npz"), params, meta)
        all_records.extend(records)
    rows = summarize(all_records)
    write_summary(rows, out / f"{run}-summary.csv")
    for row in rows:
        if row["split"] == "test":
            echo(format_row(row))
    for k, v in sorted(results[0][3].items()):
        echo(f"{run} baseline {k} = {v:.6g}")
    return all_records, rows


# -- aggregation -----------------------------------------------------------------------


def summarize(records):
    """Mean and std across seeds of each run's test metrics (last recorded epoch per seed)."""
    finals = {}
    for r in records:
        if r.split != "test":
            continue
        key = (r.run, r.split, r.metric)
        finals.setdefault(key, {})[r.seed] = r.value
    rows = []
    for (run, split, metric), by_seed in sorted(finals.items()):
        mean, std = training.mean_std(by_seed[s] for s in sorted(by_seed))
        rows.append(dict(run=run, split=split, metric=metric, mean=mean, std=std, n=len(by_seed)))
    return rows


def format_row(row):
    return f"{row['run']} {row['split']} {row['metric']} = {row['mean']:.6g} ± {row['std']:.3g} (n={row['n']})"


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "split", "metric", "mean", "std", "n"])
        for r in rows:
            w.writerow([r["run"], r["split"], r["metric"], repr(r["mean"]), repr(r["std"]), r["n"]])


def gate_curve(alpha, beta, R):
    """Upper-bound gate ``max(0, beta + e^alpha - e^(alpha r))`` for ``r = 1..R``."""
    r = np.arange(1, R + 1)
    return r, np.maximum(0.0, beta + math.exp(alpha) - np.exp(alpha * r))


def write_columns(path, header, a, b):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(a, b):
            w.writerow([x, repr(float(y)) if isinstance(y, float | np.floating) else y])


def depth_histogram(depths, R_max):
    return np.arange(0, R_max + 1), np.bincount(np.asarray(depths, dtype=np.int64), minlength=R_max + 1)


def evaluate_checkpoint(path, split="test", overrides=None):
    """Rebuild a model from a checkpoint and score it; returns ``(spec, metrics, depths)``."""
    params, meta = cells.load_checkpoint(path)
    if not meta or "spec" not in meta:
        raise DataError(f"{path} has no experiment metadata")
    spec_dict = dict(meta["spec"])
    spec_dict.update({k: v for k, v in (overrides or {}).items() if v is not None})
    spec = ExperimentSpec.from_dict(spec_dict)
    data = load_task_data(spec)
    model = build_model(spec, data)
    if set(params) != set(model.init_params(Rng(0))):
        raise DataError(f"{path}: parameter names do not match the recorded model")
    part = {"train": data.train, "val": data.val, "test": data.test}[split]
    metrics = model.evaluate(params, part)
    depths = training.collect_depths(model, params, part) if model.adaptive else np.empty(0, np.int64)
    return spec, metrics, depths


# -- argument parsing ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_spec_flags(p):
    p.add_argument("--task", choices=TASKS, default="synthetic")
    p.add_argument("--cell", choices=CELL_KINDS, default="eirehn")
    p.add_argument("--d-h", type=int, default=20, help="hidden units per layer")
    p.add_argument("--d-z", type=int, default=None, help="hypernetwork units (default ceil(d_h / 2))")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--r", type=int, default=1, help="fixed depth of rhn/srhn")
    p.add_argument("--r-max", type=int, default=10, help="depth cap of srehn/eirehn")
    p.add_argument("--alpha-hat-init", type=float, default=-2.0)
    p.add_argument("--beta-hat-init", type=float, default=2.0)
    p.add_argument("--gate-bias-init", type=float, default=-4.0)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--data", default=None, help="synthetic dataset file written by synth-gen")
    p.add_argument("--n", type=int, default=10000, help="synthetic sequences when --data is absent")
    p.add_argument("--t", type=int, default=21)
    p.add_argument("--data-r-max", type=int, default=10)
    p.add_argument("--theta", type=float, default=math.pi / 6)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--har-root", default=None)
    p.add_argument("--val-size", type=int, default=None)
    p.add_argument("--bptt", type=int, default=35)
    p.add_argument("--corpus-length", type=int, default=100_000)


def build_parser():
    parser = _Parser(prog="eirehn", description="EI-REHN experiments: data, training, evaluation, verification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="write a synthetic regression dataset")
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--t", type=int, default=21)
    p.add_argument("--r-max", type=int, default=10)
    p.add_argument("--theta", type=float, default=math.pi / 6)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one spec over one or more seeds")
    p.add_argument("--config")
    _add_spec_flags(p)
    p.add_argument("--seed", type=int, default=0, help="base seed; runs use seed, seed+1, ...")
    p.add_argument("--seeds", type=int, default=1, help="number of runs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--jsonl", action="store_true", help="also write JSON-lines metrics")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--data", default=None)
    p.add_argument("--har-root", default=None)
    p.add_argument("--out", default=None, help="metrics CSV")
    p.add_argument("--depth-hist", default=None, help="two-column depth,count CSV")

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--config")
    p.add_argument("--suite", action="append", choices=sorted(verify.SUITES), default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="aggregate metrics and emit plot data")
    p.add_argument("--config")
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gate-alpha", type=float, action="append", default=None)
    p.add_argument("--gate-beta", type=float, action="append", default=None)
    p.add_argument("--gate-r", type=int, default=10)
    return parser


def read_config(path):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{num}: expected key = value")
        out[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return out


def parse_args(argv):
    parser = build_parser()
    # find the subcommand and config file first, so the file can satisfy required flags
    pre = _Parser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    if not known.config or known.command not in commands:
        return parser.parse_args(argv)
    values = read_config(known.config)
    subparser = commands[known.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{known.config}: unknown key {key!r} for {known.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            val = action.type(raw) if action.type else raw
        except ValueError as exc:
            raise UsageError(f"{known.config}: bad value for {key}: {raw!r}") from exc
        if action.choices is not None and val not in action.choices:
            raise UsageError(f"{known.config}: {key} must be one of {sorted(action.choices)}")
        defaults[key] = [val] if isinstance(action, argparse._AppendAction) else val
    subparser.set_defaults(**defaults)
    for a in subparser._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def spec_from_args(a):
    d = TASK_DEFAULTS[a.task]
    cfg = training.TrainConfig(
        batch_size=a.batch_size or d["batch_size"], epochs=a.epochs or d["epochs"],
        learning_rate=d["lr"] if a.lr is None else a.lr, seed=a.seed,
        clip_norm=d["clip_norm"] if a.clip_norm is None else (a.clip_norm or None), eval_every=a.eval_every)
    names = {f.name for f in fields(ExperimentSpec)} - {"train"}
    return ExperimentSpec(train=cfg, **{k: getattr(a, k) for k in names})


# -- commands --------------------------------------------------------------------------


def cmd_synth_gen(a):
    if a.t < 2:
        raise ConfigError("synthetic regression needs sequences of length T >= 2 (got --t %d)" % a.t)
    cfg = synthgen.SynthConfig(N=a.n, T=a.t, R_max=a.r_max, theta=a.theta, noise_sigma=a.noise_sigma, seed=a.seed)
    data = synthgen.generate(cfg)
    try:
        synthgen.save_text(data, a.out)
    except OSError as exc:
        raise DataError(f"cannot write {a.out}: {exc}") from exc
    print(f"wrote {len(data)} sequences of length {cfg.T} to {a.out}")
    return EXIT_OK


def cmd_train(a):
    if a.jobs < 1 or a.seeds < 1:
        raise ConfigError("--jobs and --seeds must be >= 1")
    run_training(spec_from_args(a), seeds=a.seeds, jobs=a.jobs, jsonl=a.jsonl)
    return EXIT_OK


def cmd_eval(a):
    spec, metrics, depths = evaluate_checkpoint(a.checkpoint, a.split, {"data": a.data, "har_root": a.har_root})
    for k, v in metrics.items():
        print(f"{spec.run_name()} {a.split} {k} = {v:.10g}")
    if a.out:
        _, meta = cells.load_checkpoint(a.checkpoint)
        recs = [training.MetricsRecord(spec.run_name(), meta["seed"], meta["best_epoch"], a.split, k, v, 0.0)
                for k, v in metrics.items()]
        training.write_metrics_csv(recs, a.out)
    if a.depth_hist:
        if not depths.size:
            raise ConfigError(f"{spec.cell} has no adaptive depth to histogram")
        write_columns(a.depth_hist, ["depth", "count"], *depth_histogram(depths, spec.r_max))
    return EXIT_OK


def cmd_verify(a):
    names = a.suite or list(verify.SUITES)
    ok = True
    for name in names:
        res = verify.run_suite(name, seed=a.seed)
        print(res.line(), flush=True)
        ok &= res.passed
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_report(a):
    src = Path(a.metrics_dir)
    files = sorted(p for p in src.glob("*.csv") if not p.name.endswith("-summary.csv")) if src.is_dir() else []
    records = []
    for f in files:
        try:
            records.extend(training.read_metrics_csv(f))
        except (KeyError, ValueError):
            continue
    if not records:
        raise DataError(f"no metrics files in {a.metrics_dir}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(records)
    write_summary(rows, out / "summary.csv")
    for row in rows:
        print(format_row(row))
    alphas = a.gate_alpha or [math.log(2.0)]
    betas = a.gate_beta or [0.5]
    for alpha in alphas:
        for beta in betas:
            r, d = gate_curve(alpha, beta, a.gate_r)
            write_columns(out / f"gate_curve_alpha{alpha:.4g}_beta{beta:.4g}.csv", ["r", "d"], r, d)
    for ckpt in sorted(src.glob("*.npz")):
        spec, _, depths = evaluate_checkpoint(ckpt)
        if depths.size:
            write_columns(out / f"depth_hist_{ckpt.stem}.csv", ["depth", "count"],
                          *depth_histogram(depths, spec.r_max))
    return EXIT_OK


COMMANDS = {"synth-gen": cmd_synth_gen, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "report": cmd_report}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EirehnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
