"""Property suites behind ``eirehn verify``.

Each suite runs a fixed seed matrix and returns a :class:`SuiteResult` with
the number of checks, violations and the worst observed value.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import cells
from . import ndcore as nd
from .cells import Cell
from .errors import ConfigError
from .ndcore import Rng, derive_seed
from .train import SequenceRegressor


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checks: int
    violations: int
    worst: float
    detail: str
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.checks} checks, {self.violations} violations, "
                f"worst {self.worst:.6g} ({self.detail}) [{self.seconds:.1f}s]")


def random_eirehn(rng, D_h=4, D_x=2, D_z=2, R_max=5):
    """Generic EI-REHN parameters: default init plus N(0, 0.5) noise, varied gates."""
    cell = Cell("eirehn", D_h, D_x, R_max=R_max, D_z=D_z)
    p = cell.init(rng)
    p = cells.map_tensors(p, lambda n, v: v + rng.normal(0.0, 0.5, size=v.shape))
    p.gate.alpha_hat = rng.uniform(-4.0, 0.0, size=D_h)
    p.gate.beta_hat = rng.uniform(-2.0, 3.0, size=D_h)
    p.gate.W_a[:, -1] = rng.uniform(-5.0, 1.0, size=D_h)
    return cell, p


def _inputs(rng, D_h, D_x, B=None):
    shape = () if B is None else (B,)
    return rng.uniform(-1.0, 1.0, size=shape + (D_h,)), rng.normal(0.0, 1.5, size=shape + (D_x,))


def _central(f, params, name, index, eps):
    q = {k: v.copy() for k, v in params.items()}
    q[name][index] += eps
    up = float(f(q).item())
    q[name][index] -= 2 * eps
    return (up - float(f(q).item())) / (2 * eps)


def suite_gradcheck(seed=0, seeds=10, D_h=4, D_z=2, D_x=2, R_max=3, T=3, eps=1e-5, tol=1e-4):
    """Central-difference check of an unrolled EI-REHN regression loss.

    Each seed draws a freshly initialized cell plus linear head, inputs and
    targets (batch of 2).  The detail string also gives the worst element's
    difference quotient at eps = 1e-3, which separates finite-difference
    resolution limits (tiny gradients) from genuine mismatches.
    """
    worst, bad, where = 0.0, 0, ""
    for i in range(seeds):
        rng = Rng(derive_seed(seed, 100, i))
        model = SequenceRegressor([Cell("eirehn", D_h, D_x, R_max=R_max, D_z=D_z)], 2)
        flat = model.init_params(rng)
        x = rng.normal(size=(2, T, D_x))
        y = rng.normal(size=(2, T, 2))

        def f(q):
            return model.loss(q, dict(x=x, y=y))[0]

        err, (name, index, analytic, numeric) = nd.grad_check(f, flat, eps=eps, details=True)
        bad += err >= tol
        if err >= worst:
            coarse = _central(f, flat, name, index, 1e-3)
            index = [int(k) for k in np.atleast_1d(index)]
            worst = err
            where = (f"seed {i}, {name}{index}: analytic {analytic:.6e}, "
                     f"numeric {numeric:.6e}, numeric@1e-3 {coarse:.6e}")
    return worst < tol, seeds, bad, worst, f"max relative error, tol {tol:g}; {where}"


def suite_gate_monotonicity(seed=0, draws=1000, D=5, D_x=3, R=12):
    """``d^{r+1} <= d^r`` for every unit, layer pair and draw."""
    rng = Rng(derive_seed(seed, 101))
    worst, bad, checks = -np.inf, 0, 0
    for _ in range(draws):
        gp = cells.ElasticGateParams(
            alpha_hat=rng.uniform(-5.0, 2.0, size=D), beta_hat=rng.uniform(-4.0, 4.0, size=D),
            W_a=rng.normal(0.0, 2.0, size=(D, D + D_x + 1)))
        h, x = _inputs(rng, D, D_x)
        ds = np.array([cells.elastic_gate(gp, h, x, r).value for r in range(1, R + 1)])
        inc = ds[1:] - ds[:-1]
        checks += inc.size
        bad += int(np.sum(inc > 0))
        worst = max(worst, float(inc.max()))
    return bad == 0, checks, bad, worst, "max d^{r+1} - d^r"


def suite_depth_bound(seed=0, draws=1000, B=4):
    """Realized depth never exceeds ``min(R_max, depth_upper_bound)``."""
    rng = Rng(derive_seed(seed, 102))
    worst, bad, checks = -np.inf, 0, 0
    for i in range(draws):
        R_max = 1 + i % 8
        cell, p = random_eirehn(rng, 4, 2, 2, R_max)
        h, x = _inputs(rng, 4, 2, B)
        _, trace = cells.eirehn_step(p, h, x)
        limit = min(R_max, cells.depth_upper_bound(p.gate))
        over = trace.realized_depth - limit
        checks += B
        bad += int(np.sum(over > 0))
        worst = max(worst, float(over.max()))
    return bad == 0, checks, bad, worst, "max realized depth minus limit"


def suite_pass_through(seed=0, draws=1000, D=6):
    """Units whose gate is zero at every layer keep ``h_{t-1}`` bit-exactly."""
    rng = Rng(derive_seed(seed, 103))
    checks, equal, worst = 0, 0, 0.0
    for _ in range(draws):
        cell, p = random_eirehn(rng, D, 2, 3, 4)
        closed = rng.uniform(size=D) < 0.5
        # beta ~ 0 and alpha_t > 0 make beta + e^alpha < e^(alpha + alpha_t) at every r
        p.gate.beta_hat = np.where(closed, -60.0, p.gate.beta_hat)
        h, x = _inputs(rng, D, 2)
        out, _ = cells.eirehn_step(p, h, x)
        checks += int(closed.sum())
        equal += int(np.sum(out.value[closed] == h[closed]))
        if closed.any():
            worst = max(worst, float(np.max(np.abs(out.value[closed] - h[closed]))))
    return equal == checks, checks, checks - equal, worst, f"{equal}/{checks} bit-exact"


def suite_reduction(seed=0, draws=100, D=4, B=8, tol=1e-12):
    """EI-REHN with zeroed hypernetwork and saturated mixing gate equals SREHN."""
    rng = Rng(derive_seed(seed, 104))
    worst, bad = 0.0, 0
    for _ in range(draws):
        _, p = random_eirehn(rng, D, 2, 2, 5)
        p.hyper = cells.map_tensors(p.hyper, lambda n, v: np.zeros_like(v))
        p.hyper.bbar_s = np.full(D, 50.0)
        p.hyper.bbar_g = np.full(D, 50.0)
        sp = cells.SrehnParams(p.W_xs, p.W_xg, p.W_s, p.W_g, p.b_s, p.b_g, p.gate, p.R_max)
        h, x = _inputs(rng, D, 2, B)
        a, ta = cells.eirehn_step(p, h, x)
        b, tb = cells.srehn_step(sp, h, x)
        diff = float(np.max(np.abs(a.value - b.value)))
        worst = max(worst, diff)
        bad += diff > tol or not np.array_equal(ta.realized_depth, tb.realized_depth)
    return bad == 0, draws, bad, worst, f"max |EI-REHN - SREHN|, tol {tol:g}"


SUITES = {
    "gradcheck": suite_gradcheck,
    "gate-monotonicity": suite_gate_monotonicity,
    "depth-bound": suite_depth_bound,
    "pass-through": suite_pass_through,
    "reduction": suite_reduction,
}


def run_suite(name, seed=0, **kw):
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    t0 = time.perf_counter()
    passed, checks, bad, worst, detail = SUITES[name](seed=seed, **kw)
    return SuiteResult(name, bool(passed), int(checks), int(bad), float(worst), detail, time.perf_counter() - t0)
