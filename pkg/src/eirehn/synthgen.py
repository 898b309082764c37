"""Synthetic sequence-regression data with a latent, state-dependent depth.

Each sequence evolves a 2-d latent state.  At step ``t`` the number of inner
iterations is ``R_t = round((R_max - 1) * |h_{t-1}|^2) + 1`` (round half away
from zero, never clamped), each iteration being
``h <- tanh(Rot(theta) h + n)`` with ``n ~ N(0, c I)`` where the covariance
``c`` is 0.1 by default (``noise_sigma = 0.1``; other values scale the
standard deviation by ``noise_sigma / 0.1``).  The observation is
``x_t = R_t / R_max * [tanh(h1 + h2), tanh(h1 - h2)]``.

Random draws: sample ``n`` uses its own stream ``Rng(derive_seed(seed, n))``
and draws, in order, ``h_0`` (2 uniforms on [-1, 1)) and then a noise block of
shape ``(T, 2 R_max - 1, 2)`` (standard normals); iteration ``r`` of step
``t`` uses ``noise[t, r - 1]``.  ``2 R_max - 1`` is the largest reachable
depth because ``|h|^2 < 2``.  Samples are therefore independent of each other
and of generation order.
"""

from __future__ import annotations

import ast
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ndcore import Rng, derive_seed


@dataclass(frozen=True)
class SynthConfig:
    N: int = 10000
    T: int = 21
    R_max: int = 10
    theta: float = math.pi / 6
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self):
        if self.N < 1 or self.T < 1 or self.R_max < 1:
            raise ConfigError("N, T and R_max must all be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self

    @property
    def depth_cap(self):
        return 2 * (self.R_max - 1) + 1


@dataclass
class SequenceSample:
    xs: np.ndarray
    depths: np.ndarray
    hidden: np.ndarray


@dataclass
class SynthDataset:
    """``xs``: (N, T, 2); ``depths``: (N, T) ints; ``hidden``: (N, T, 2)."""

    xs: np.ndarray
    depths: np.ndarray
    hidden: np.ndarray
    config: SynthConfig

    def __len__(self):
        return self.xs.shape[0]

    def __getitem__(self, i):
        return SequenceSample(self.xs[i], self.depths[i], self.hidden[i])

    def subset(self, lo, hi):
        return SynthDataset(self.xs[lo:hi], self.depths[lo:hi], self.hidden[lo:hi], self.config)


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def depth_for(sq_norm, R_max):
    """``round((R_max - 1) * sq_norm) + 1`` with ties away from zero."""
    return np.floor((R_max - 1) * np.asarray(sq_norm) + 0.5).astype(np.int64) + 1


def _draws(cfg, n):
    rng = Rng(derive_seed(cfg.seed, n))
    h0 = rng.uniform(-1.0, 1.0, size=2)
    noise = rng.normal(size=(cfg.T, cfg.depth_cap, 2))
    return h0, noise


def generate(cfg: SynthConfig, h0=None) -> SynthDataset:
    """Generate ``cfg.N`` sequences.

    ``h0`` optionally overrides the initial latent states (shape ``(N, 2)``);
    the noise draws are unaffected.
    """
    cfg.validate()
    N, T = cfg.N, cfg.T
    start = np.empty((N, 2))
    noise = np.empty((N, T, cfg.depth_cap, 2))
    for n in range(N):
        start[n], noise[n] = _draws(cfg, n)
    if h0 is not None:
        start = np.broadcast_to(np.asarray(h0, dtype=np.float64), (N, 2)).copy()
    noise *= math.sqrt(0.1) * (cfg.noise_sigma / 0.1)
    c, s = math.cos(cfg.theta), math.sin(cfg.theta)
    h = start
    xs = np.empty((N, T, 2))
    hidden = np.empty((N, T, 2))
    depths = np.empty((N, T), dtype=np.int64)
    for t in range(T):
        R = depth_for(np.einsum("ij,ij->i", h, h), cfg.R_max)
        depths[:, t] = R
        for r in range(1, int(R.max()) + 1):
            step = R >= r
            # elementwise rotation: per-sample results must not depend on batch size
            a, b = h[step, 0], h[step, 1]
            n = noise[step, t, r - 1]
            h[step] = np.tanh(np.stack([c * a - s * b + n[:, 0], s * a + c * b + n[:, 1]], axis=1))
        hidden[:, t] = h
        scale = (R / cfg.R_max)[:, None]
        xs[:, t] = scale * np.tanh(np.stack([h[:, 0] + h[:, 1], h[:, 0] - h[:, 1]], axis=1))
    return SynthDataset(xs, depths, hidden, cfg)


def split(dataset: SynthDataset, sizes):
    """Split in generation order into consecutive (train, val, test) parts."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s < 0 for s in sizes) or sum(sizes) != len(dataset):
        raise ConfigError(f"split sizes {sizes} must be three non-negative counts summing to {len(dataset)}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return dataset.subset(0, a), dataset.subset(a, b), dataset.subset(b, len(dataset))


def proportional_sizes(N, fractions=(0.8, 0.1, 0.1)):
    """Integer split sizes in the 8:1:1 proportions; the remainder goes to train."""
    val = int(N * fractions[1])
    test = int(N * fractions[2])
    return N - val - test, val, test


def regression_pairs(sample):
    """Inputs ``x_1..x_{T-1}`` and next-step targets ``x_2..x_T``.

    Accepts a :class:`SequenceSample`, an array ``(T, 2)`` or a batch
    ``(N, T, 2)``; returns ``(inputs, targets)`` with the time axis shortened
    by one.
    """
    xs = sample.xs if isinstance(sample, SequenceSample) else np.asarray(sample)
    if xs.shape[-2] < 2:
        raise ConfigError("regression pairs need sequences of length T >= 2")
    return xs[..., :-1, :], xs[..., 1:, :]


# -- text export -------------------------------------------------------------

_FORMAT_TAG = "eirehn-synth-v1"


def save_text(dataset: SynthDataset, path):
    """Columnar text: ``#`` header lines with the config, then rows
    ``sample t depth x1 x2 h1 h2`` with 17 significant digits."""
    cfg = dataset.config
    N, T = dataset.xs.shape[:2]
    n_idx, t_idx = np.meshgrid(np.arange(N), np.arange(T), indexing="ij")
    with open(path, "w") as fh:
        fh.write(f"# {_FORMAT_TAG}\n")
        for k, v in asdict(cfg).items():
            fh.write(f"# {k}={v!r}\n")
        fh.write(f"# rows={N * T}\n")
        fh.write("# columns=sample t depth x1 x2 h1 h2\n")
        for n, t in zip(n_idx.ravel(), t_idx.ravel()):
            x, h = dataset.xs[n, t], dataset.hidden[n, t]
            fh.write(f"{n} {t} {dataset.depths[n, t]} {x[0]:.17g} {x[1]:.17g} {h[0]:.17g} {h[1]:.17g}\n")


def load_text(path) -> SynthDataset:
    header = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not lines or lines[0].strip() != f"# {_FORMAT_TAG}":
        raise DataError(f"{path} is not an {_FORMAT_TAG} file")
    body = []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key] = val
        elif line.strip():
            body.append(line)
    fields = {f: type(getattr(SynthConfig(), f)) for f in asdict(SynthConfig())}
    try:
        cfg = SynthConfig(**{k: fields[k](ast.literal_eval(header[k])) for k in fields})
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad or missing header field ({exc})") from exc
    rows = np.array([ln.split() for ln in body], dtype=np.float64) if body else np.empty((0, 7))
    if rows.shape[0] != cfg.N * cfg.T or (rows.size and rows.shape[1] != 7):
        raise DataError(f"{path}: expected {cfg.N * cfg.T} rows of 7 columns")
    rows = rows.reshape(cfg.N, cfg.T, 7)
    return SynthDataset(rows[..., 3:5].copy(), rows[..., 2].astype(np.int64), rows[..., 5:7].copy(), cfg)

