"""Shared independent oracles for the test suite.

Everything here is deliberately written without reusing the production code
paths it checks: plain loops, explicit elimination, classical Jacobi sweeps.
"""

from __future__ import annotations

import math

import numpy as np


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def fd_grad(f, arr, eps=1e-5):
    """Dense central finite differences of scalar f() wrt arr (in place)."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def fd_probe(f, arr, flat_index, eps=1e-5):
    """Central difference for a single flat entry of arr."""
    flat = arr.ravel()
    old = flat[flat_index]
    flat[flat_index] = old + eps
    fp = f()
    flat[flat_index] = old - eps
    fm = f()
    flat[flat_index] = old
    return (fp - fm) / (2.0 * eps)


def matmul_loops(a, b):
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def jacobi_eigenvalues(mat, sweeps=50, tol=1e-14):
    """Classical Jacobi rotations; returns eigenvalues sorted ascending."""
    a = np.array(mat, dtype=float)
    n = a.shape[0]
    if n == 1:
        return a.ravel().copy()
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(a[p, q]))
        if off <= tol * max(1.0, np.abs(np.diag(a)).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    return np.sort(np.diag(a))


def gauss_inverse(mat):
    """Matrix inverse by Gauss-Jordan elimination with partial pivoting."""
    a = np.array(mat, dtype=float)
    n = a.shape[0]
    aug = np.hstack([a, np.eye(n)])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[piv, col]) == 0.0:
            raise np.linalg.LinAlgError("singular matrix")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] = aug[col] / aug[col, col]
        for r in range(n):
            if r != col:
                aug[r] = aug[r] - aug[r, col] * aug[col]
    return aug[:, n:]


def gauss_determinant(mat):
    """Determinant via LU elimination with partial pivoting."""
    a = np.array(mat, dtype=float)
    n = a.shape[0]
    det = 1.0
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) == 0.0:
            return 0.0
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            det = -det
        det *= a[col, col]
        a[col + 1:] = a[col + 1:] - np.outer(a[col + 1:, col] / a[col, col], a[col])
    return det


def mvn_nll_explicit(resid, sigma):
    """NLL of one Gaussian slice from explicit determinant and inverse."""
    s = len(resid)
    det = gauss_determinant(sigma)
    inv = gauss_inverse(sigma)
    quad = float(resid @ inv @ resid)
    return 0.5 * (s * math.log(2.0 * math.pi) + math.log(det) + quad)
