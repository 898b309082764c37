import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eirehn import cells, ndcore as nd
from eirehn.cells import Cell
from eirehn.errors import ShapeError
from oracles import eirehn_reference, softplus

TANH1 = math.tanh(1.0)


def random_params(kind, D_h=3, D_x=2, seed=0, **kw):
    cell = Cell(kind, D_h, D_x, **kw)
    return cell, cell.init(nd.Rng(seed))


def deep_eirehn(seed, D_h=2, D_x=2, D_z=None, R_max=6):
    """EI-REHN params perturbed so that several layers execute."""
    rng = np.random.default_rng(seed)
    cell = Cell("eirehn", D_h, D_x, R_max=R_max, D_z=D_z)
    p = cell.init(nd.Rng(seed))
    p = cells.map_tensors(p, lambda n, v: v + rng.normal(scale=0.5, size=v.shape))
    p.gate.alpha_hat = rng.uniform(-4.0, -2.0, size=D_h)
    p.gate.beta_hat = rng.uniform(0.0, 3.0, size=D_h)
    p.gate.W_a[:, -1] = -4.0
    return cell, p


class TestRnnLstmRhn:
    def test_rnn_zero_weights(self):
        p = cells.RnnParams(W_R=np.zeros((3, 6)))
        h = cells.rnn_step(p, np.array([1.0, -2.0, 0.5]), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(h.value, 0.0)

    def test_rnn_scalar(self):
        p = cells.RnnParams(W_R=np.array([[1.0, 1.0, 0.0]]))
        assert cells.rnn_step(p, [0.5], [0.5]).item() == pytest.approx(0.761594, abs=1e-6)

    def test_rnn_range_and_shape_error(self):
        _, p = random_params("rnn", seed=3)
        h = cells.rnn_step(p, np.full(3, 50.0), np.full(2, -50.0))
        assert np.all(np.abs(h.value) <= 1.0)
        with pytest.raises(ShapeError):
            cells.rnn_step(p, np.zeros(4), np.zeros(2))

    def test_lstm_zero(self):
        p = cells.LstmParams(W_L=np.zeros((8, 5)))
        h, c = cells.lstm_step(p, np.zeros(2), np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(c.value, 0.0)
        np.testing.assert_array_equal(h.value, 0.0)

    def test_lstm_carry(self):
        p = cells.LstmParams(W_L=np.zeros((8, 5)))
        h, c = cells.lstm_step(p, np.zeros(2), np.full(2, 2.0), np.zeros(2))
        np.testing.assert_allclose(c.value, 1.0, rtol=0, atol=1e-15)
        np.testing.assert_allclose(h.value, 0.5 * TANH1, atol=1e-15)
        assert h.value[0] == pytest.approx(0.380797, abs=1e-6)

    def test_lstm_input_gate_closed(self):
        _, p = random_params("lstm", D_h=2, seed=1)
        W = p.W_L.copy()
        W[2:4, :] = 0.0
        W[2:4, -1] = -1e4
        c_prev = np.array([0.3, -0.7])
        h, c = cells.lstm_step(cells.LstmParams(W), np.array([0.1, 0.2]), c_prev, np.array([1.0, 2.0]))
        f = 1 / (1 + np.exp(-(W[4:6] @ np.array([0.1, 0.2, 1.0, 2.0, 1.0]))))
        np.testing.assert_allclose(c.value, f * c_prev, atol=1e-15)

    def test_rhn_zero_weights_halves(self):
        p = cells.RhnParams(W_H=[np.zeros((6, 5)), np.zeros((6, 3))])
        hp = np.array([0.8, -0.4])
        np.testing.assert_allclose(cells.rhn_step(p, hp, np.ones(2)).value, 0.25 * hp, atol=1e-15)

    def test_rhn_pure_carry(self):
        W = np.zeros((6, 5))
        W[2:4, -1] = -1e4
        W[4:6, -1] = 1e4
        hp = np.array([0.3, 0.9])
        np.testing.assert_array_equal(cells.rhn_step(cells.RhnParams([W]), hp, np.ones(2)).value, hp)

    @pytest.mark.parametrize("depth", [1, 2, 4])
    def test_rhn_shape(self, depth):
        _, p = random_params("rhn", D_h=5, depth=depth)
        assert cells.rhn_step(p, np.zeros(5), np.ones(2)).shape == (5,)
        assert p.W_H[-1].shape == ((15, 8) if depth == 1 else (15, 6))


class TestElasticGate:
    def gate(self, alpha_hat=0.0, beta_hat=0.0, D=1, D_x=1):
        W_a = np.zeros((D, D + D_x + 1))
        W_a[:, -1] = -1e4  # alpha_t == 0
        return cells.ElasticGateParams(np.full(D, alpha_hat), np.full(D, beta_hat), W_a)

    def test_first_layer(self):
        d = cells.elastic_gate(self.gate(), np.zeros(1), np.zeros(1), 1)
        assert d.item() == pytest.approx(0.5, abs=1e-12)

    def test_second_layer_clipped(self):
        assert cells.elastic_gate(self.gate(), np.zeros(1), np.zeros(1), 2).item() == 0.0

    def test_bad_layer(self):
        with pytest.raises(ValueError):
            cells.elastic_gate(self.gate(), np.zeros(1), np.zeros(1), 0)

    def test_bound_values(self):
        assert cells.depth_upper_bound(self.gate(0.0, 0.0)) == 1
        assert cells.depth_upper_bound(self.gate(0.0, -60.0)) == 1
        assert softplus(-2.0) == pytest.approx(0.126928, abs=1e-6)
        assert cells.depth_upper_bound(self.gate(-2.0, 0.0)) == 3

    def test_bound_takes_max_over_units(self):
        gp = cells.ElasticGateParams(np.array([0.0, -2.0]), np.zeros(2), np.zeros((2, 4)))
        assert cells.depth_upper_bound(gp) == 3

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_depth(self, seed):
        rng = np.random.default_rng(seed)
        gp = cells.ElasticGateParams(rng.normal(size=4) * 2, rng.normal(size=4) * 2, rng.normal(size=(4, 7)))
        h, x = rng.uniform(-1, 1, 4), rng.normal(size=2)
        ds = [cells.elastic_gate(gp, h, x, r).value for r in range(1, 12)]
        for a, b in zip(ds, ds[1:]):
            assert np.all(b <= a)
            assert np.all(b[a == 0] == 0)
        assert np.all(ds[0] >= 0)


class TestHyper:
    def zero(self, D=3, Z=2):
        zz = lambda *s: np.zeros(s)
        return cells.HyperParams(zz(Z, D), zz(Z, D), zz(Z, Z), zz(Z), zz(D, Z), zz(D, Z), zz(D, Z), zz(D, Z), zz(D), zz(D))

    def test_zero_weights(self):
        z, ws, wg, gs, gg = cells.hyper_step(self.zero(), np.ones(3), np.ones(3), np.ones(2))
        for v in (z, ws, wg):
            np.testing.assert_array_equal(v.value, 0.0)
        np.testing.assert_array_equal(gs.value, 0.5)
        np.testing.assert_array_equal(gg.value, 0.5)

    def test_scalar(self):
        hp = self.zero(1, 1)
        hp.W_zh = np.ones((1, 1))
        z, *_ = cells.hyper_step(hp, np.ones(1), np.zeros(1), np.zeros(1))
        assert z.item() == pytest.approx(0.761594, abs=1e-6)

    def test_ranges(self):
        _, p = random_params("eirehn", D_h=6, seed=4)
        rng = np.random.default_rng(0)
        z, ws, wg, gs, gg = cells.hyper_step(p.hyper, rng.normal(size=6) * 20, rng.normal(size=6), rng.normal(size=3))
        assert np.all(np.abs(z.value) < 1)
        assert np.all((gs.value > 0) & (gs.value < 1))

    def test_none_means_zero(self):
        _, p = random_params("eirehn", D_h=4, seed=5)
        a = cells.hyper_step(p.hyper, None, None, None)
        b = cells.hyper_step(p.hyper, np.zeros(4), np.zeros(4), np.zeros(2))
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u.value, v.value)


class TestGatedResidual:
    def scalar_params(self):
        _, p = random_params("eirehn", D_h=1, D_x=1)
        for name in ("W_s", "W_g", "W_xs", "W_xg", "b_s", "b_g"):
            setattr(p, name, np.zeros_like(getattr(p, name)))
        return p

    def test_scalar_example(self):
        p = self.scalar_params()
        v, acc = cells.gated_residual(p, "s", np.array([0.2]), np.array([0.4]), np.array([0.5]),
                                      np.array([1.0]), np.array([0.0]), 2)
        assert v.item() == pytest.approx(0.291313, abs=1e-6)
        assert v.item() == pytest.approx(math.tanh(0.3), abs=1e-15)
        assert acc.item() == pytest.approx(0.6, abs=1e-15)

    def test_zero_dynamic_path_is_shared_layer(self):
        _, p = random_params("eirehn", D_h=3, seed=2)
        h, x = np.array([0.1, -0.5, 0.3]), np.array([1.0, 2.0])
        for stream, act in (("s", np.tanh), ("g", lambda v: 1 / (1 + np.exp(-v)))):
            W, Wx, b = (p.W_s, p.W_xs, p.b_s) if stream == "s" else (p.W_g, p.W_xg, p.b_g)
            v, _ = cells.gated_residual(p, stream, np.zeros(3), np.zeros(3), np.full(3, 0.3), h, x, 1)
            np.testing.assert_allclose(v.value, act(W @ h + Wx @ x + b), atol=1e-15)
            v2, _ = cells.gated_residual(p, stream, np.zeros(3), np.zeros(3), np.full(3, 0.3), h, x, 2)
            np.testing.assert_allclose(v2.value, act(W @ h + b), atol=1e-15)

    def test_saturated_gate_uses_accumulation(self):
        p = self.scalar_params()
        v, _ = cells.gated_residual(p, "s", np.array([0.2]), np.array([5.0]), np.array([1.0]),
                                    np.array([1.5]), np.array([0.0]), 3)
        assert v.item() == pytest.approx(math.tanh(0.3), abs=1e-15)

    def test_bad_stream(self):
        p = self.scalar_params()
        with pytest.raises(ValueError):
            cells.gated_residual(p, "q", None, np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 1)


class TestEirehnStep:
    def test_pass_through_when_gate_closed(self):
        cell, p = random_params("eirehn", D_h=4, seed=1)
        p.gate.beta_hat = np.full(4, -60.0)
        hp = np.array([0.3, -0.2, 0.9, -0.99])
        h, tr = cells.eirehn_step(p, hp, np.array([0.5, 0.5]))
        assert tr.realized_depth == 0
        np.testing.assert_array_equal(h.value, hp)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_straight_line_oracle(self, seed):
        cell, p = deep_eirehn(seed)
        rng = np.random.default_rng(100 + seed)
        hp, x = rng.uniform(-1, 1, 2), rng.normal(size=2)
        h, tr = cells.eirehn_step(p, hp, x)
        ref_h, ref_depth = eirehn_reference(cells.flatten(p), hp, x, p.R_max)
        assert tr.realized_depth == ref_depth
        np.testing.assert_allclose(h.value, ref_h, rtol=0, atol=1e-12)

    def test_oracle_exercises_depth(self):
        depths = []
        for seed in range(6):
            _, p = deep_eirehn(seed)
            rng = np.random.default_rng(100 + seed)
            depths.append(cells.eirehn_step(p, rng.uniform(-1, 1, 2), rng.normal(size=2))[1].realized_depth)
        assert max(depths) >= 3

    def test_batch_equals_per_sample(self):
        _, p = deep_eirehn(7, D_h=3, D_x=2)
        rng = np.random.default_rng(8)
        H, X = rng.uniform(-1, 1, (16, 3)), rng.normal(size=(16, 2)) * 2
        Hb, trb = cells.eirehn_step(p, H, X)
        for i in range(16):
            h, tr = cells.eirehn_step(p, H[i], X[i])
            # gemm vs gemv summation order differs in the last ulp
            np.testing.assert_allclose(Hb.value[i], h.value, rtol=0, atol=1e-13)
            assert trb.realized_depth[i] == tr.realized_depth
        assert len(set(trb.realized_depth.tolist())) > 1

    def test_depth_within_bounds(self):
        for seed in range(20):
            cell, p = deep_eirehn(seed, R_max=4)
            rng = np.random.default_rng(seed)
            _, tr = cells.eirehn_step(p, rng.uniform(-1, 1, (8, 2)), rng.normal(size=(8, 2)))
            assert np.all(tr.realized_depth <= min(p.R_max, cells.depth_upper_bound(p.gate)))

    def test_shape_mismatch(self):
        _, p = random_params("eirehn", D_h=3)
        with pytest.raises(ShapeError):
            cells.eirehn_step(p, np.zeros(3), np.zeros(3))


class TestSharedVariants:
    def test_srehn_equals_zero_hyper_eirehn(self):
        for seed in range(5):
            _, p = deep_eirehn(seed, D_h=3)
            p.hyper = cells.map_tensors(p.hyper, lambda n, v: np.zeros_like(v))
            p.hyper.bbar_s = np.full(3, 50.0)
            p.hyper.bbar_g = np.full(3, 50.0)
            sp = cells.SrehnParams(p.W_xs, p.W_xg, p.W_s, p.W_g, p.b_s, p.b_g, p.gate, p.R_max)
            rng = np.random.default_rng(seed)
            H, X = rng.uniform(-1, 1, (10, 3)), rng.normal(size=(10, 2))
            a, ta = cells.eirehn_step(p, H, X)
            b, tb = cells.srehn_step(sp, H, X)
            np.testing.assert_allclose(a.value, b.value, rtol=0, atol=1e-12)
            np.testing.assert_array_equal(ta.realized_depth, tb.realized_depth)

    def test_srehn_matches_oracle(self):
        _, p = deep_eirehn(3, D_h=2)
        sp = cells.SrehnParams(p.W_xs, p.W_xg, p.W_s, p.W_g, p.b_s, p.b_g, p.gate, p.R_max)
        hp, x = np.array([0.4, -0.6]), np.array([0.2, 0.9])
        ref, depth = eirehn_reference(cells.flatten(p), hp, x, p.R_max, with_hyper=False)
        h, tr = cells.srehn_step(sp, hp, x)
        np.testing.assert_allclose(h.value, ref, atol=1e-12)
        assert tr.realized_depth == depth

    def test_srhn_open_gate_is_residual(self):
        _, p = random_params("srhn", D_h=3, depth=1, seed=2)
        p.W_g = np.zeros((3, 3))
        p.W_xg = np.zeros((3, 2))
        p.b_g = np.full(3, 50.0)
        hp, x = np.array([0.1, 0.2, 0.3]), np.array([1.0, -1.0])
        np.testing.assert_allclose(cells.srhn_step(p, hp, x).value, np.tanh(p.W_s @ hp + p.W_xs @ x), atol=1e-15)

    @pytest.mark.parametrize("R", [1, 2, 3, 5])
    def test_srhn_zero_weights(self, R):
        _, p = random_params("srhn", D_h=2, depth=R)
        p = cells.map_tensors(p, lambda n, v: np.zeros_like(v))
        hp = np.array([0.6, -0.8])
        np.testing.assert_allclose(cells.srhn_step(p, hp, np.ones(2)).value, hp * 0.5**R, atol=1e-15)


class TestUnroll:
    def test_length_one_is_step(self):
        cell, p = random_params("eirehn", D_h=3, seed=2)
        x = np.array([[0.3, -0.1]])
        hs, traces = cells.unroll(cell, p, x)
        h, _ = cells.eirehn_step(p, np.zeros(3), x[0])
        np.testing.assert_array_equal(hs[0].value, h.value)

    def test_zero_rnn(self):
        cell = Cell("rnn", 3, 2)
        hs, _ = cells.unroll(cell, cells.RnnParams(np.zeros((3, 6))), np.ones((5, 2)))
        assert all(np.all(h.value == 0) for h in hs)

    def test_empty(self):
        cell, p = random_params("rnn")
        with pytest.raises(ShapeError):
            cells.unroll(cell, p, [])

    def test_lstm_and_stack(self):
        c1, p1 = random_params("lstm", D_h=4, D_x=2, seed=1)
        c2, p2 = random_params("eirehn", D_h=3, D_x=4, seed=2)
        xs = np.random.default_rng(0).normal(size=(6, 5, 2))
        top, traces = cells.unroll_stack([(c1, p1), (c2, p2)], xs)
        assert len(top) == 6 and top[-1].shape == (5, 3)
        assert traces[0][0] is None and traces[1][0].realized_depth.shape == (5,)


class TestCounting:
    def test_rnn_table_total(self):
        cell = Cell("rnn", 20, 2)
        n = cells.count_parameters(cell.init(nd.Rng(0)))
        assert n == 460
        assert n + 2 * 20 + 2 == 502

    def test_lstm_formula(self):
        for D in (10, 15, 20):
            n = cells.count_parameters(Cell("lstm", D, 2).init(nd.Rng(0)))
            assert n == 4 * D * (D + 3)
        assert cells.count_parameters(Cell("lstm", 10, 2).init(nd.Rng(0))) + 22 == 542

    def test_eirehn_enumeration(self):
        D, X, Z = 10, 2, 5
        p = Cell("eirehn", D, X, D_z=Z).init(nd.Rng(0))
        gate = 2 * D + D * (D + X + 1)
        shared = 2 * D * X + 2 * D * D + 2 * D
        hyper = 2 * Z * D + Z * Z + Z + 4 * D * Z + 2 * D
        assert cells.count_parameters(p) == gate + shared + hyper

    def test_default_dz(self):
        assert Cell("eirehn", 7, 2).D_z == 4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cell, p = random_params("eirehn", D_h=5, seed=9)
        flat = cells.flatten(p, "l0.")
        flat["l0.W_s"][0, 0] = np.nextafter(1.0, 2.0)
        path = tmp_path / "ck.npz"
        cells.save_checkpoint(path, flat, {"cell": cell.describe()})
        back, meta = cells.load_checkpoint(path)
        assert meta["cell"]["kind"] == "eirehn"
        assert set(back) == set(flat)
        for k in flat:
            assert back[k].tobytes() == np.ascontiguousarray(flat[k]).tobytes()
        q = cells.unflatten(p, back, "l0.")
        assert q.R_max == p.R_max and np.array_equal(q.hyper.P_s, p.hyper.P_s)


def unrolled_loss(cell, template, xs, readout):
    def f(bound):
        p = cells.unflatten(template, bound)
        hs, _ = cells.unroll(cell, p, xs)
        total = 0.0
        for t, h in enumerate(hs):
            total = nd.tsum(h * readout[t]) + total
        return total

    return f


@pytest.mark.parametrize(
    "kind,kw",
    [("rnn", {}), ("lstm", {}), ("rhn", {"depth": 3}), ("srhn", {"depth": 3}),
     ("srehn", {"R_max": 4}), ("eirehn", {"R_max": 4, "D_z": 2})],
)
def test_gradient_soundness(kind, kw):
    # zero gate bias keeps every gradient well above the finite-difference noise floor
    cell = Cell(kind, 3, 2, alpha_hat_init=-2.5, gate_bias_init=0.0, **kw)
    template = cell.init(nd.Rng(4))
    rng = np.random.default_rng(4)
    xs = rng.normal(size=(3, 2, 2))
    readout = rng.normal(size=(3, 2, 3))
    err = nd.grad_check(unrolled_loss(cell, template, xs, readout), cells.flatten(template))
    assert err < 1e-4
