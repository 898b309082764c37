"""Real-data tasks: HAR sequence classification and character/word language modelling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .errors import ConfigError, ContractError, DataError
from .ndcore import Rng, derive_seed
from .train import SequenceModel, cross_entropy_loss, split_len, take_rows

# -- HAR ------------------------------------------------------------------------

HAR_CHANNELS = tuple(
    f"{group}_{axis}" for group in ("body_acc", "body_gyro", "total_acc") for axis in "xyz"
)
HAR_STEPS = 128
HAR_CLASSES = 6
HAR_COUNTS = (7352, 2947)


@dataclass
class HarData:
    """Standardized signals ``(N, 128, 9)`` and 0-based labels for train and test."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def find_har_root(root):
    """Accept either the dataset folder itself or a directory containing ``UCI HAR Dataset``."""
    root = Path(root)
    for cand in (root, root / "UCI HAR Dataset"):
        if (cand / "train" / "Inertial Signals").is_dir():
            return cand
    return None


def _read_matrix(path, cols=None):
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise DataError(f"missing HAR file {path}") from exc
    except ValueError as exc:
        raise DataError(f"malformed HAR file {path}: {exc}") from exc
    if cols is not None and arr.shape[1] != cols:
        raise DataError(f"{path}: expected {cols} columns, found {arr.shape[1]}")
    return arr


def _read_split(root, split, expected):
    chans = [
        _read_matrix(root / split / "Inertial Signals" / f"{c}_{split}.txt", HAR_STEPS) for c in HAR_CHANNELS
    ]
    labels = _read_matrix(root / split / f"y_{split}.txt", 1)[:, 0]
    counts = {len(c) for c in chans} | {len(labels)}
    if len(counts) != 1:
        raise DataError(f"HAR {split}: channel and label files disagree on the sample count")
    n = counts.pop()
    if expected is not None and n != expected:
        raise DataError(f"HAR {split}: expected {expected} samples, found {n}")
    if np.any(labels != np.round(labels)) or labels.min() < 1 or labels.max() > HAR_CLASSES:
        raise DataError(f"HAR {split}: labels must be integers in 1..{HAR_CLASSES}")
    return np.stack(chans, axis=-1), labels.astype(np.int64) - 1


def load_har(root, expected_counts=HAR_COUNTS):
    """Load the raw inertial signals of the UCI HAR dataset.

    Channels are ordered body_acc xyz, body_gyro xyz, total_acc xyz.  Each
    channel is standardized with the train-split mean and std over all
    samples and steps.  ``expected_counts=None`` skips the size check (for
    fixtures).
    """
    base = find_har_root(root)
    if base is None:
        raise DataError(f"no HAR dataset under {root} (expected train/Inertial Signals)")
    exp_tr, exp_te = expected_counts if expected_counts is not None else (None, None)
    x_tr, y_tr = _read_split(base, "train", exp_tr)
    x_te, y_te = _read_split(base, "test", exp_te)
    mean = x_tr.mean(axis=(0, 1))
    std = x_tr.std(axis=(0, 1))
    std = np.where(std > 0, std, 1.0)
    return HarData((x_tr - mean) / std, y_tr, (x_te - mean) / std, y_te, mean, std)


def har_validation_split(data: HarData, n_val, seed=0):
    """Hold out ``n_val`` random training sequences; returns train/val/test dicts."""
    n = len(data.y_train)
    if not 0 <= n_val < n:
        raise ConfigError(f"validation size must be in [0, {n})")
    order = Rng(derive_seed(seed, 2)).permutation(n)
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    full = dict(x=data.x_train, y=data.y_train)
    return take_rows(full, tr_idx), take_rows(full, val_idx), dict(x=data.x_test, y=data.y_test)


def classify_head(p, h):
    """Class logits from the final hidden state: ``W h + b``."""
    return nd.linear(h, p["head.W"]) + p["head.b"]


class SequenceClassifier(SequenceModel):
    """Stacked cells read out once at the last step; trained with cross-entropy."""

    selection_metric = "accuracy"
    higher_is_better = True

    def __init__(self, layers, n_classes=HAR_CLASSES):
        super().__init__(layers)
        self.n_classes = n_classes

    def init_head(self, rng):
        D = self.layers[-1].D_h
        s = 1.0 / math.sqrt(D + 1)
        return {"head.W": rng.uniform(-s, s, size=(self.n_classes, D)), "head.b": np.zeros(self.n_classes)}

    def logits(self, p, x):
        hs, traces = self.encode(p, [x[:, t, :] for t in range(x.shape[1])])
        return classify_head(p, hs[-1]), traces

    def loss(self, p, batch):
        z, traces = self.logits(p, batch["x"])
        per = cross_entropy_loss(z, batch["y"], reduction="none")
        stats = {"loss_sum": math.fsum(per.value), "count": per.value.size, "depths": self.depths(traces),
                 "correct": int(np.sum(np.argmax(z.value, axis=-1) == batch["y"]))}
        return nd.mean(per), stats

    def evaluate(self, p, split, chunk=500):
        ce, n, correct, depths = [], 0, 0, []
        for lo in range(0, split_len(split), chunk):
            _, st = self.loss(p, take_rows(split, slice(lo, lo + chunk)))
            ce.append(st["loss_sum"])
            n += st["count"]
            correct += st["correct"]
            depths.append(st["depths"])
        out = {"accuracy": correct / n, "cross_entropy": math.fsum(ce) / n}
        dep = np.concatenate(depths)
        if dep.size:
            out["mean_depth"] = float(dep.mean())
        return out


# -- language modelling -----------------------------------------------------------

UNK = "<unk>"
EOS = "<eos>"


class Vocab:
    """Token <-> id map; unknown tokens map to ``<unk>`` (always id 0)."""

    def __init__(self, tokens):
        self.itos = [UNK] + sorted(set(tokens) - {UNK})
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens):
        return np.array([self.stoi.get(t, 0) for t in tokens], dtype=np.int64)

    def decode(self, ids):
        return [self.itos[int(i)] for i in ids]


@dataclass
class LmCorpus:
    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    char_level: bool


@dataclass
class LmHeadParams:
    """Tied embedding/readout ``U`` of shape ``(H, C)`` plus an output bias ``(C,)``."""

    U: object
    b: object


def lm_windows(ids, bptt):
    """Non-overlapping windows of ``bptt`` inputs plus their shifted targets.

    Returns ``{"x": (n, bptt), "y": (n, bptt)}``; consecutive windows share a
    boundary token so every position but the first is a target exactly once.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if bptt < 1:
        raise ConfigError("bptt must be >= 1")
    n = (len(ids) - 1) // bptt
    if n < 1:
        return dict(x=np.zeros((0, bptt), np.int64), y=np.zeros((0, bptt), np.int64))
    idx = np.arange(n)[:, None] * bptt + np.arange(bptt + 1)[None, :]
    w = ids[idx]
    return dict(x=w[:, :-1], y=w[:, 1:])


def embed(U, ids):
    """Column lookup ``U[:, ids]`` returned as ``(B, H)``."""
    return nd.take(nd.transpose(nd.as_tensor(U)), ids, axis=0)


def lm_logits(head, h):
    """``h U + b``: scores for every vocabulary entry, ``(B, C)``."""
    return nd.matmul(h, head.U) + head.b


def lm_forward(model, p, ids):
    """Per-step logits for a batch of windows ``ids`` of shape ``(B, L)``."""
    head = LmHeadParams(p["head.U"], p["head.b"])
    steps = [embed(head.U, ids[:, t]) for t in range(ids.shape[1])]
    hs, traces = model.encode(p, steps)
    return [lm_logits(head, h) for h in hs], traces


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def perplexity(mean_ce):
    return math.exp(mean_ce)


class TiedLanguageModel(SequenceModel):
    """Recurrent LM whose input embedding and output projection share ``U``."""

    selection_metric = "cross_entropy"

    def __init__(self, layers, vocab_size):
        super().__init__(layers)
        if layers[0].D_x != layers[-1].D_h:
            raise ConfigError("tied embeddings need input size == top hidden size")
        self.vocab_size = vocab_size

    def init_head(self, rng):
        H = self.layers[-1].D_h
        return {"head.U": rng.uniform(-0.1, 0.1, size=(H, self.vocab_size)), "head.b": np.zeros(self.vocab_size)}

    def loss(self, p, batch):
        x, y = batch["x"], batch["y"]
        if x.size and (x.max() >= self.vocab_size or y.max() >= self.vocab_size):
            raise ContractError("token id outside the vocabulary")
        logits, traces = lm_forward(self, p, x)
        total, sums = 0.0, []
        for t, z in enumerate(logits):
            per = cross_entropy_loss(z, y[:, t], reduction="none")
            total = nd.tsum(per) + total
            sums.append(per.value)
        count = y.size
        stats = {"loss_sum": math.fsum(np.concatenate(sums)), "count": count, "depths": self.depths(traces)}
        return total * (1.0 / count), stats

    def evaluate(self, p, split, chunk=200):
        ce, n, depths = [], 0, []
        for lo in range(0, split_len(split), chunk):
            _, st = self.loss(p, take_rows(split, slice(lo, lo + chunk)))
            ce.append(st["loss_sum"])
            n += st["count"]
            depths.append(st["depths"])
        mean_ce = math.fsum(ce) / n
        out = {"cross_entropy": mean_ce, "perplexity": perplexity(mean_ce)}
        dep = np.concatenate(depths)
        if dep.size:
            out["mean_depth"] = float(dep.mean())
        return out


def unigram_perplexity(train_ids, eval_ids, vocab_size):
    """Perplexity of add-one smoothed train unigram frequencies on ``eval_ids``."""
    counts = np.bincount(np.asarray(train_ids), minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return math.exp(-float(np.mean(logp[np.asarray(eval_ids)])))


def split_ids(ids, fractions=(0.8, 0.1, 0.1)):
    n = len(ids)
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return ids[:a], ids[a:b], ids[b:]


_TOY_ALPHABET = "abcdefghijklmnopqrstuvwxyz .,"


def toy_corpus(seed=0, length=100_000, successors=3):
    """Character text from a random sparse second-order Markov chain.

    Every two-character context allows only ``successors`` next characters,
    so a recurrent model can beat unigram statistics by a wide margin.
    Returns an :class:`LmCorpus` split 80/10/10.
    """
    if length < 10:
        raise ConfigError("toy corpus length must be >= 10")
    rng = Rng(derive_seed(seed, 3))
    A = len(_TOY_ALPHABET)
    nxt = np.empty((A, A, successors), dtype=np.int64)
    cum = np.empty((A, A, successors))
    for i in range(A):
        for j in range(A):
            nxt[i, j] = rng.permutation(A)[:successors]
            w = rng.uniform(0.2, 1.0, size=successors)
            cum[i, j] = np.cumsum(w / w.sum())
    u = rng.uniform(size=length)
    seq = np.empty(length, dtype=np.int64)
    seq[0], seq[1] = 0, 1
    for k in range(2, length):
        c = cum[seq[k - 2], seq[k - 1]]
        seq[k] = nxt[seq[k - 2], seq[k - 1], min(int(np.searchsorted(c, u[k], side="right")), successors - 1)]
    text = [_TOY_ALPHABET[i] for i in seq]
    vocab = Vocab(text)
    tr, va, te = split_ids(vocab.encode(text))
    return LmCorpus(vocab, tr, va, te, char_level=True)


def load_ptb(root, char_level=False):
    """Read ``ptb.{train,valid,test}.txt`` (or the ``ptb.char.*`` files).

    Word level appends ``<eos>`` to each line; the vocabulary is built from
    the training split.  Character files are already space-separated symbols.
    """
    root = Path(root)
    prefix = "ptb.char." if char_level else "ptb."
    splits = {}
    for name in ("train", "valid", "test"):
        path = root / f"{prefix}{name}.txt"
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise DataError(f"missing language-model file {path}") from exc
        toks = []
        for line in lines:
            words = line.split()
            if words or not char_level:
                toks.extend(words + [EOS])
        splits[name] = toks
    if not splits["train"]:
        raise DataError(f"{root}: empty training split")
    vocab = Vocab(splits["train"])
    return LmCorpus(vocab, *(vocab.encode(splits[k]) for k in ("train", "valid", "test")), char_level=char_level)

