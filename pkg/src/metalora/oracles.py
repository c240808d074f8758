"""Brute-force reference evaluations.

Plain Python loops over every index tuple, sharing no code with the
implementations they check.  Slow by design; keep inputs small.
"""

from __future__ import annotations

import itertools

import numpy as np


def rel_error(got, want) -> float:
    """Max-norm error relative to the max-norm of ``want`` (absolute if ``want`` is zero)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return float("inf")
    scale = np.max(np.abs(want)) if want.size else 0.0
    err = np.max(np.abs(got - want)) if want.size else 0.0
    return float(err / scale) if scale > 0 else float(err)


def contract(a: np.ndarray, b: np.ndarray, pairs) -> np.ndarray:
    pairs = list(pairs)
    ca = [i for i, _ in pairs]
    cb = [j for _, j in pairs]
    free_a = [i for i in range(a.ndim) if i not in ca]
    free_b = [j for j in range(b.ndim) if j not in cb]
    out_shape = tuple(a.shape[i] for i in free_a) + tuple(b.shape[j] for j in free_b)
    out = np.zeros(out_shape)
    shared = [range(a.shape[i]) for i in ca]
    for oidx in itertools.product(*[range(n) for n in out_shape]):
        total = 0.0
        for sidx in itertools.product(*shared):
            ia = [0] * a.ndim
            ib = [0] * b.ndim
            for pos, ax in enumerate(free_a):
                ia[ax] = oidx[pos]
            for pos, ax in enumerate(free_b):
                ib[ax] = oidx[len(free_a) + pos]
            for (i, j), s in zip(pairs, sidx):
                ia[i] = s
                ib[j] = s
            total += a[tuple(ia)] * b[tuple(ib)]
        out[oidx] = total
    return out


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            out[i, j] = s
    return out


def conv1d(a, b, stride: int, padding: int, out_len: int) -> np.ndarray:
    y = np.zeros(out_len)
    for jp in range(out_len):
        for k in range(len(b)):
            j = stride * jp + k - padding
            if 0 <= j < len(a):
                y[jp] += a[j] * b[k]
    return y


def conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    H, W, I = x.shape
    K, K2, _, O = w.shape
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K2) // stride + 1
    out = np.zeros((Ho, Wo, O))
    for h in range(Ho):
        for v in range(Wo):
            for o in range(O):
                s = 0.0
                for kh in range(K):
                    for kw in range(K2):
                        hh = stride * h + kh - padding
                        ww = stride * v + kw - padding
                        if 0 <= hh < H and 0 <= ww < W:
                            for i in range(I):
                                s += x[hh, ww, i] * w[kh, kw, i, o]
                out[h, v, o] = s
    return out


def cp(factors, lambdas) -> np.ndarray:
    shape = tuple(f.shape[0] for f in factors)
    out = np.zeros(shape)
    for idx in itertools.product(*[range(n) for n in shape]):
        s = 0.0
        for r in range(len(lambdas)):
            term = lambdas[r]
            for n, i in enumerate(idx):
                term *= factors[n][i, r]
            s += term
        out[idx] = s
    return out


def tr(cores) -> np.ndarray:
    shape = tuple(g.shape[1] for g in cores)
    ranks = [g.shape[0] for g in cores]
    N = len(cores)
    out = np.zeros(shape)
    for idx in itertools.product(*[range(n) for n in shape]):
        s = 0.0
        for bonds in itertools.product(*[range(r) for r in ranks]):
            term = 1.0
            for n in range(N):
                term *= cores[n][bonds[n], idx[n], bonds[(n + 1) % N]]
            s += term
        out[idx] = s
    return out


def meta_cp(A, B, c) -> np.ndarray:
    I, R = A.shape
    O = B.shape[1]
    out = np.zeros((I, O))
    for i in range(I):
        for o in range(O):
            out[i, o] = sum(A[i, r] * B[r, o] * c[r] for r in range(R))
    return out


def meta_tr(A, B, C) -> np.ndarray:
    R, I, _ = A.shape
    O = B.shape[1]
    out = np.zeros((I, O))
    for i in range(I):
        for o in range(O):
            s = 0.0
            for r0 in range(R):
                for r1 in range(R):
                    for r2 in range(R):
                        s += A[r0, i, r1] * B[r1, o, r2] * C[r2, r0]
            out[i, o] = s
    return out


def conv_rank_sum(A, B, c=None) -> np.ndarray:
    K1, K2, I, R = A.shape
    O = B.shape[1]
    c = np.ones(R) if c is None else c
    out = np.zeros((K1, K2, I, O))
    for idx in itertools.product(range(K1), range(K2), range(I), range(O)):
        k1, k2, i, o = idx
        out[idx] = sum(A[k1, k2, i, r] * B[r, o] * c[r] for r in range(R))
    return out


def mlp(layers, f) -> np.ndarray:
    """Loop evaluation of ``h <- act(W h + b)``; ``layers`` is (W, b, act) triples."""
    h = [float(v) for v in f]
    for W, b, act in layers:
        nxt = []
        for o in range(W.shape[0]):
            z = b[o]
            for i in range(W.shape[1]):
                z += W[o, i] * h[i]
            if act == "tanh":
                z = float(np.tanh(z))
            elif act == "relu":
                z = max(z, 0.0)
            nxt.append(z)
        h = nxt
    return np.array(h)


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = fn(x)
        flat[k] = old - h
        fm = fn(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def knn_exhaustive(train_emb, train_labels, test_emb, k: int) -> list:
    """KNN by sorting every (distance, index) pair explicitly."""
    preds = []
    for t in test_emb:
        d = sorted((float(np.sqrt(sum((a - b) ** 2 for a, b in zip(t, e)))), i) for i, e in enumerate(train_emb))
        top = d[:k]
        votes = {}
        for dist, i in top:
            lab = int(train_labels[i])
            cnt, tot = votes.get(lab, (0, 0.0))
            votes[lab] = (cnt + 1, tot + dist)
        preds.append(min(votes, key=lambda c: (-votes[c][0], votes[c][1], c)))
    return preds
