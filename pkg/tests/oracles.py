"""Independent brute-force oracles used by the test suite.

Everything here is deliberately written the slow, obvious way (explicit
loops, no shared code with the package) so the oracles stay independent
of the implementations they check.
"""

from __future__ import annotations

import numpy as np


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def transposed_conv2d_direct(
    x: np.ndarray, kernel: np.ndarray, stride: int
) -> np.ndarray:
    """Direct scatter-sum definition of the fractionally-strided convolution."""
    c, h, w = x.shape
    c2, co, kh, kw = kernel.shape
    assert c == c2
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    out = np.zeros((co, ho, wo), dtype=np.float64)
    for ci in range(c):
        for o in range(co):
            for i in range(h):
                for j in range(w):
                    for di in range(kh):
                        for dj in range(kw):
                            out[o, i * stride + di, j * stride + dj] += (
                                x[ci, i, j] * kernel[ci, o, di, dj]
                            )
    return out


def top_k_full_sort(sim: np.ndarray, k: int) -> float:
    """Sort every row (descending value, ascending column on ties) and check
    whether the diagonal index survives in the first k entries."""
    n = sim.shape[0]
    hits = 0
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-sim[i, j], j))
        if i in order[:k]:
            hits += 1
    return hits / n


def auc_pairwise(labels: np.ndarray, scores: np.ndarray) -> float:
    """Exhaustive pairwise concordance with half-credit for ties."""
    pos = [s for lab, s in zip(labels, scores) if lab == 1]
    neg = [s for lab, s in zip(labels, scores) if lab == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def r_squared_two_pass(y: np.ndarray, y_hat: np.ndarray) -> float:
    mean = sum(y) / len(y)
    ss_res = sum((a - b) ** 2 for a, b in zip(y, y_hat))
    ss_tot = sum((a - mean) ** 2 for a in y)
    return 1.0 - ss_res / ss_tot


def assert_grads_close(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    rtol: float = 1e-5,
    atol: float = 1e-8,
) -> None:
    """Elementwise |a-n| <= atol + rtol*|n|, skipping unprobed (NaN) coords."""
    assert set(analytic) == set(numeric)
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        mask = ~np.isnan(n)
        assert mask.any(), f"no probed coordinates for {name}"
        diff = np.abs(a[mask] - n[mask])
        bound = atol + rtol * np.abs(n[mask])
        worst = np.max(diff - bound)
        assert np.all(diff <= bound), (
            f"gradient mismatch for {name}: worst excess {worst:.3e}"
        )
