"""Optimization, losses, models' shared plumbing and the epoch loop."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import cells
from . import ndcore as nd
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .ndcore import Rng, Tape, derive_seed

METRIC_COLUMNS = ("run", "seed", "epoch", "split", "metric", "value", "seconds")


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params, grads):
    """One bias-corrected Adam step, updating ``params`` (a dict of arrays) in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}", name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def clip_global_norm(grads, max_norm):
    total = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# -- losses ---------------------------------------------------------------------


def mse_loss(pred, target):
    """Mean over all elements of the squared difference."""
    pred, target = nd.as_tensor(pred), nd.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return nd.mean(diff * diff)


def cross_entropy_loss(logits, labels, reduction="mean"):
    """``-log softmax(logits)[label]`` with max-shifted log-sum-exp.

    ``logits`` is ``(C,)`` with an int label, or ``(B, C)`` with ``B`` labels.
    """
    logits = nd.as_tensor(logits)
    C = logits.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= C):
        raise ContractError(f"label out of range [0, {C})")
    onehot = np.zeros(logits.shape)
    if lab.ndim == 0:
        onehot[int(lab)] = 1.0
    else:
        onehot[np.arange(lab.size), lab] = 1.0
    picked = nd.tsum(logits * onehot, axis=-1)
    per = nd.logsumexp(logits, axis=-1) - picked
    if reduction == "none":
        return per
    if per.ndim == 0:
        return per
    return nd.tsum(per) if reduction == "sum" else nd.mean(per)


# -- models ---------------------------------------------------------------------


def take_rows(split, idx):
    return {k: v[idx] for k, v in split.items()}


def split_len(split):
    return len(next(iter(split.values())))


class SequenceModel:
    """Stacked recurrent layers plus a task head over flat parameter dicts.

    Parameter names are ``l{i}.<field>`` for layer ``i`` and ``head.<name>``
    for the head.  Subclasses implement ``init_head``, ``loss`` and
    ``evaluate``; ``selection_metric``/``higher_is_better`` drive checkpoint
    selection.
    """

    selection_metric = "loss"
    higher_is_better = False

    def __init__(self, layers):
        if not layers:
            raise ConfigError("a model needs at least one recurrent layer")
        for below, above in zip(layers, layers[1:]):
            if above.D_x != below.D_h:
                raise ConfigError(f"layer input {above.D_x} does not match hidden size {below.D_h} below it")
        self.layers = list(layers)
        self._templates = [c.init(Rng(0)) for c in self.layers]

    @property
    def adaptive(self):
        return any(c.adaptive for c in self.layers)

    def init_params(self, rng):
        flat = {}
        for i, cell in enumerate(self.layers):
            flat.update(cells.flatten(cell.init(rng), f"l{i}."))
        flat.update(self.init_head(rng))
        return flat

    def init_head(self, rng):
        return {}

    def count_parameters(self, params):
        return int(sum(v.size for v in params.values()))

    def layer_params(self, p, i):
        return cells.unflatten(self._templates[i], p, f"l{i}.")

    def encode(self, p, steps):
        """Run the stack over time-major steps; returns ``(top hidden seq, traces per layer)``."""
        seq, all_traces = steps, []
        for i, cell in enumerate(self.layers):
            seq, traces = cells.unroll(cell, self.layer_params(p, i), seq)
            all_traces.append(traces)
        return seq, all_traces

    @staticmethod
    def depths(all_traces):
        """Realized depths of all adaptive layers, flattened (empty if none)."""
        out = [np.ravel(tr.realized_depth) for traces in all_traces for tr in traces if tr is not None]
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def describe(self):
        return {"model": type(self).__name__, "layers": [c.describe() for c in self.layers]}


class SequenceRegressor(SequenceModel):
    """Per-step linear readout trained with element-mean squared error."""

    selection_metric = "mse"

    def __init__(self, layers, D_out):
        super().__init__(layers)
        self.D_out = D_out

    def init_head(self, rng):
        D = self.layers[-1].D_h
        s = 1.0 / math.sqrt(D + 1)
        return {"head.W": rng.uniform(-s, s, size=(self.D_out, D)), "head.b": np.zeros(self.D_out)}

    def predict(self, p, x):
        steps = [x[:, t, :] for t in range(x.shape[1])]
        hs, traces = self.encode(p, steps)
        return [nd.linear(h, p["head.W"]) + p["head.b"] for h in hs], traces

    def loss(self, p, batch):
        x, y = batch["x"], batch["y"]
        preds, traces = self.predict(p, x)
        total, sq = 0.0, np.zeros(x.shape[0])
        for t, pred in enumerate(preds):
            diff = pred - y[:, t, :]
            total = nd.tsum(diff * diff) + total
            sq += np.sum(diff.value * diff.value, axis=-1)
        count = y.size
        return total * (1.0 / count), {"loss_sum": math.fsum(sq), "count": count, "depths": self.depths(traces)}

    def evaluate(self, p, split, chunk=1000):
        sq, count, depths = [], 0, []
        for lo in range(0, split_len(split), chunk):
            batch = take_rows(split, slice(lo, lo + chunk))
            _, stats = self.loss(p, batch)
            sq.append(stats["loss_sum"])
            count += stats["count"]
            depths.append(stats["depths"])
        out = {"mse": math.fsum(sq) / count}
        dep = np.concatenate(depths)
        if dep.size:
            out["mean_depth"] = float(dep.mean())
        return out


def collect_depths(model, params, split, chunk=500):
    """Realized depths of every adaptive layer over every step of ``split``."""
    out = []
    for lo in range(0, split_len(split), chunk):
        _, stats = model.loss(params, take_rows(split, slice(lo, lo + chunk)))
        out.append(stats["depths"])
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


# -- training loop --------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 100
    learning_rate: float = 0.01
    seed: int = 0
    clip_norm: float | None = None
    eval_every: int = 1

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, epochs and eval_every must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        return self


@dataclass
class MetricsRecord:
    run: str
    seed: int
    epoch: int
    split: str
    metric: str
    value: float
    seconds: float

    def row(self):
        return [self.run, self.seed, self.epoch, self.split, self.metric, repr(float(self.value)), f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    records: list
    best_params: dict
    best_epoch: int
    best_value: float
    final_params: dict


def _better(model, a, b):
    return a > b if model.higher_is_better else a < b


def train_epochs(model, train, val, cfg: TrainConfig, run="run", test=None, params=None, log=None):
    """Mini-batch Adam training with best-on-validation checkpoint retention.

    ``train``/``val``/``test`` are dicts of row-aligned arrays.  Returns a
    :class:`TrainResult`; the test split (if given) is scored with the best
    parameters and recorded at the last epoch run.
    """
    cfg.validate()
    n = split_len(train)
    if n == 0:
        raise ContractError("training split is empty")
    if params is None:
        params = model.init_params(Rng(derive_seed(cfg.seed, 0)))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    adam = AdamState(lr=cfg.learning_rate)
    records = []
    t0 = time.perf_counter()
    loss_name = model.selection_metric if model.selection_metric != "accuracy" else "cross_entropy"
    best = (None, -1, None)

    def emit(epoch, split, metrics):
        now = time.perf_counter() - t0
        for k, v in metrics.items():
            records.append(MetricsRecord(run, cfg.seed, epoch, split, k, float(v), now))
        if log:
            log(run, epoch, split, metrics)

    if val is not None and split_len(val):
        m = model.evaluate(params, val)
        best = (m[model.selection_metric], 0, {k: v.copy() for k, v in params.items()})
    last = 0
    for epoch in range(1, cfg.epochs + 1):
        last = epoch
        order = Rng(derive_seed(cfg.seed, 1, epoch)).permutation(n)
        sums, count, depths = [], 0, []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = take_rows(train, order[lo:lo + cfg.batch_size])
            tape = Tape()
            bound = {k: tape.leaf(v, k) for k, v in params.items()}
            loss, stats = model.loss(bound, batch)
            if not np.isfinite(loss.value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}", (epoch, b))
            grads = tape.backward(loss)
            if cfg.clip_norm:
                grads, _ = clip_global_norm(grads, cfg.clip_norm)
            try:
                adam_update(adam, params, grads)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b}", (epoch, b, exc.where)) from exc
            sums.append(stats["loss_sum"])
            count += stats["count"]
            if stats.get("depths") is not None and stats["depths"].size:
                depths.append(stats["depths"])
        train_metrics = {loss_name: math.fsum(sums) / count}
        if depths:
            train_metrics["mean_depth"] = float(np.concatenate(depths).mean())
        emit(epoch, "train", train_metrics)
        if val is not None and split_len(val) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            m = model.evaluate(params, val)
            emit(epoch, "val", m)
            if best[0] is None or _better(model, m[model.selection_metric], best[0]):
                best = (m[model.selection_metric], epoch, {k: v.copy() for k, v in params.items()})
    if best[2] is None:
        best = (None, last, {k: v.copy() for k, v in params.items()})
    if test is not None and split_len(test):
        emit(last, "test", model.evaluate(best[2], test))
    return TrainResult(records, best[2], best[1], best[0], params)


# -- records ----------------------------------------------------------------------


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


def write_metrics_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(dict(zip(METRIC_COLUMNS, r.row()))) + "\n")


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["run"], int(r["seed"]), int(r["epoch"]), r["split"], r["metric"],
                          float(r["value"]), float(r["seconds"])) for r in rows]


def final_metric(records, split, metric):
    vals = [r for r in records if r.split == split and r.metric == metric]
    if not vals:
        raise KeyError(f"no {split}/{metric} record")
    return max(vals, key=lambda r: r.epoch).value


def mean_std(values):
    """Mean and sample standard deviation (0 for a single value)."""
    values = list(values)
    if not values:
        raise ValueError("no values")
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), sd


def loss_improved(records, split="train", metric=None, frac=0.1):
    """Median of the last ``frac`` of epochs is below the median of the first ``frac``."""
    rows = sorted((r for r in records if r.split == split and (metric is None or r.metric == metric)
                   and r.metric != "mean_depth"), key=lambda r: r.epoch)
    vals = [r.value for r in rows]
    k = max(1, int(round(len(vals) * frac)))
    return statistics.median(vals[-k:]) < statistics.median(vals[:k])
