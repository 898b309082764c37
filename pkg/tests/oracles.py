"""Straight-line numpy re-implementations used as independent oracles.

These follow the textbook equations literally, one sample at a time, without
sharing code with the library.
"""

import math

import numpy as np


def sigm(v):
    return 1.0 / (1.0 + np.exp(-v))


def softplus(v):
    return np.log1p(np.exp(v))


def eirehn_reference(P, h_prev, x, R_max, with_hyper=True):
    """Single-sample EI-REHN (or SREHN when ``with_hyper`` is False).

    ``P`` is a flat dict of numpy arrays named as in the library's flatten().
    Returns ``(h, realized_depth)``.
    """
    D = h_prev.size
    alpha = softplus(P["gate.alpha_hat"])
    beta = sigm(P["gate.beta_hat"])
    a_t = sigm(P["gate.W_a"] @ np.concatenate([h_prev, x, [1.0]]))
    h = h_prev.copy()
    s_prev = np.zeros(D)
    g_prev = np.zeros(D)
    Dz = P["hyper.b_z"].size if with_hyper else 1
    z = np.zeros(Dz)
    Ws = P["W_s"].copy()
    Wg = P["W_g"].copy()
    depth = 0
    r = 0
    while True:
        r += 1
        if r > R_max:
            break
        if with_hyper:
            z = np.tanh(P["hyper.W_zh"] @ s_prev + P["hyper.W_zg"] @ g_prev + P["hyper.W_z"] @ z + P["hyper.b_z"])
            dWs = np.diag(P["hyper.P_s"] @ z)
            dWg = np.diag(P["hyper.P_g"] @ z)
            gb_s = sigm(P["hyper.Pbar_s"] @ z + P["hyper.bbar_s"])
            gb_g = sigm(P["hyper.Pbar_g"] @ z + P["hyper.bbar_g"])
        else:
            dWs = dWg = np.zeros((D, D))
            gb_s = gb_g = np.ones(D)
        xin = 1.0 if r == 1 else 0.0
        # base dense matrix always applied; the diagonal accumulations are gated
        acc_s = Ws - P["W_s"]
        acc_g = Wg - P["W_g"]
        pre_s = (P["W_s"] @ h + gb_s * (acc_s @ h) + (1 - gb_s) * (dWs @ h)
                 + P["W_xs"] @ x * xin + P["b_s"])
        pre_g = (P["W_g"] @ h + gb_g * (acc_g @ h) + (1 - gb_g) * (dWg @ h)
                 + P["W_xg"] @ x * xin + P["b_g"])
        s = np.tanh(pre_s)
        ghat = sigm(pre_g)
        Ws = Ws + dWs
        Wg = Wg + dWg
        d = np.maximum(beta + np.exp(alpha) - np.exp((alpha + a_t) * r), 0.0)
        g = d * ghat
        if np.abs(g).sum() > 0:
            depth = r
            h = g * s + (1 - g) * h
        else:
            break
        s_prev, g_prev = s, ghat
    return h, depth


def synth_sample_reference(h0, noise, T, R_max, theta):
    """Algorithm-style generator for one sequence given pre-drawn noise[t, r, :]."""
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    h = np.array(h0, dtype=float)
    xs, depths = [], []
    for t in range(T):
        sq = float(h @ h)
        v = (R_max - 1) * sq
        R = int(math.floor(v + 0.5)) + 1
        for r in range(R):
            h = np.tanh(rot @ h + noise[t, r])
        depths.append(R)
        xs.append(R / R_max * np.array([math.tanh(h[0] + h[1]), math.tanh(h[0] - h[1])]))
    return np.array(xs), np.array(depths)
