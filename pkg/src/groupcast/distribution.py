"""Gaussian forecast head: per-(time, channel) multivariate normals over series.

The mean is an affine readout of each series feature. The covariance slice
for a (time, channel) pair is a Gram matrix built from positive-definite
kernels: (rbf + linear) * linear over three learned projections of the
features. Sums and products of PD kernels stay PD, so every slice admits a
Cholesky factorization (a tiny diagonal jitter guards against roundoff at
the PSD boundary).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import Linear
from .errors import DimensionError, PositiveDefinitenessError
from .seeding import make_rng
from .tensor import Parameter

JITTER_REL = 1e-6
JITTER_FLOOR = 1e-8


@dataclass
class GaussianForecast:
    """Time-varying joint normal: mean [S, T, D], covariance [S, S, T, D]."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        s, t, d = self.mean.shape
        if self.cov.shape != (s, s, t, d):
            raise DimensionError(
                f"covariance shape {self.cov.shape} does not match mean {self.mean.shape}")

    @property
    def n_series(self):
        return self.mean.shape[0]


def rbf_kernel(x, y, gamma):
    """exp(-gamma * ||x - y||^2); range (0, 1] for gamma > 0."""
    if gamma <= 0:
        raise ValueError("rbf bandwidth must be positive")
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.exp(-gamma * np.dot(d, d)))


def linear_kernel(x, y):
    """Plain dot product."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DimensionError(f"kernel operands differ in length: {x.shape} vs {y.shape}")
    return float(np.dot(x, y))


class MeanHead:
    """Affine map applied independently to every (series, time) feature."""

    def __init__(self, d_model, d_out, rng, name="mean_head", dtype=np.float64):
        self.lin = Linear(d_model, d_out, rng, name, dtype)

    def __call__(self, z):
        return self.lin(z)

    def params(self):
        return self.lin.params()


class KernelHeads:
    """Per-output-channel projections feeding the covariance Gram matrix."""

    def __init__(self, d_model, d_out, rng, d_r=16, d_l=16, d_sigma=16,
                 name="cov_head", dtype=np.float64):
        self.d_out = d_out
        self.proj_r = [Linear(d_model, d_r, rng, f"{name}.r{d}", dtype) for d in range(d_out)]
        self.proj_l = [Linear(d_model, d_l, rng, f"{name}.l{d}", dtype) for d in range(d_out)]
        self.proj_s = [Linear(d_model, d_sigma, rng, f"{name}.s{d}", dtype) for d in range(d_out)]
        # bandwidth parameterized as exp(g) to stay positive; starts at 1
        self.gamma_log = Parameter(np.zeros((), dtype=dtype), f"{name}.gamma_log")

    @property
    def gamma(self):
        return float(np.exp(self.gamma_log.data))

    def params(self):
        out = [self.gamma_log]
        for group in (self.proj_r, self.proj_l, self.proj_s):
            for lin in group:
                out.extend(lin.params())
        return out

    def __call__(self, z, include_jitter=True):
        """Covariance tensor [..., S, S, T, D] from features z [..., S, T, Dm].

        Channel d slice: (rbf(r_i, r_j) + <l_i, l_j>) * <s_i, s_j> with the
        projections of that channel, plus jitter * I on the diagonal when
        requested (jitter treated as a constant in differentiation; its
        relative gradient contribution is ~1e-6).
        """
        z = T.as_tensor(z)
        lead = z.shape[:-3]
        s, t, dm = z.shape[-3:]
        gamma = T.texp(self.gamma_log)
        slabs = []
        for d in range(self.d_out):
            rf = self.proj_r[d](z)
            a = T.reshape(rf, lead + (s, 1, t, rf.shape[-1]))
            b = T.reshape(rf, lead + (1, s, t, rf.shape[-1]))
            diff = a - b
            sqd = T.tsum(diff * diff, axis=-1)          # [..., S, S, T]
            r = T.texp(T.neg(gamma) * sqd)
            slabs.append((r + self._gram(self.proj_l[d](z))) * self._gram(self.proj_s[d](z)))
        cov = T.stack(slabs, axis=-1)                   # [..., S, S, T, D]
        if include_jitter:
            ar = np.arange(s)
            diag = cov[(slice(None),) * len(lead) + (ar, ar)]       # [..., S, T, D]
            lam = T.maximum_const(
                T.tmean(diag, axis=len(lead), keepdims=True) * JITTER_REL, JITTER_FLOOR)
            lam = T.reshape(lam, lead + (1, 1, t, self.d_out))
            eye = np.eye(s).reshape((1,) * len(lead) + (s, s, 1, 1))
            cov = cov + lam * T.Tensor(eye)
        return cov

    @staticmethod
    def _gram(feat):
        # feat [..., S, T, K] -> pairwise dot products [..., S, S, T]
        nd = feat.ndim
        ft = T.transpose(feat, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))  # [..., T, S, K]
        g = T.matmul(ft, T.transpose(ft, tuple(range(nd - 2)) + (nd - 1, nd - 2)))
        return T.transpose(g, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))   # [..., S, S, T]


def mean_head(z, head: MeanHead):
    return head(z)


def covariance_head(z, heads: KernelHeads, include_jitter=True):
    return heads(z, include_jitter=include_jitter)


def nll_loss(y, mean, cov):
    """Differentiable NLL summed over (t, d), averaged over any batch axes.

    y: array or Tensor [..., S, T, D]; mean like y; cov [..., S, S, T, D].
    """
    y = T.as_tensor(y)
    resid = T.as_tensor(mean) - y
    nd = resid.ndim
    # residual -> [..., T, D, S]; covariance -> [..., T, D, S, S]
    r = T.transpose(resid, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))
    c = T.transpose(T.as_tensor(cov), tuple(range(nd - 3)) + (nd - 1, nd, nd - 3, nd - 2))
    terms = T.mvn_nll(r, c)             # [..., T, D]
    total = T.tsum(terms, axis=(-2, -1))
    if total.ndim == 0:
        return total
    return T.tmean(total)


def gaussian_nll(y, forecast: GaussianForecast) -> float:
    """Scene NLL (sum over time and channels) of truth y under the forecast."""
    with T.no_grad():
        return float(nll_loss(y, forecast.mean, forecast.cov).item())


def mae_loss(y, mean):
    """Mean absolute error of the point forecast (deterministic variants)."""
    return T.tmean(T.tabs(T.as_tensor(mean) - T.as_tensor(y)))


def sample(forecast: GaussianForecast, n, seed) -> np.ndarray:
    """n seeded joint draws, shape [n, S, T, D], via the Cholesky factor."""
    s, t, d = forecast.mean.shape
    cov = np.moveaxis(forecast.cov, (0, 1), (2, 3))      # [T, D, S, S]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        idx = _find_bad_slice(cov)
        raise PositiveDefinitenessError(
            f"covariance slice (t={idx[0]}, d={idx[1]}) is not positive definite",
            t=idx[0], d=idx[1]) from None
    rng = make_rng(seed)
    xi = rng.standard_normal((n, t, d, s))
    draws = np.moveaxis(forecast.mean, (0,), (2,)) + np.einsum("tdij,ntdj->ntdi", chol, xi)
    return np.moveaxis(draws, (3,), (1,))


def _find_bad_slice(cov_tds):
    flat = cov_tds.reshape(-1, cov_tds.shape[-1], cov_tds.shape[-1])
    for i in range(flat.shape[0]):
        try:
            np.linalg.cholesky(flat[i])
        except np.linalg.LinAlgError:
            return np.unravel_index(i, cov_tds.shape[:-2])
    return (None, None)


def dump_forecast_ndjson(forecast: GaussianForecast, series_ids, path, append=False):
    """One record per (t, d): mean vector plus covariance lower triangle."""
    s, t, d = forecast.mean.shape
    tril = np.tril_indices(s)
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for ti in range(t):
            for di in range(d):
                rec = {
                    "series_ids": list(series_ids),
                    "t": ti,
                    "d": di,
                    "mean": forecast.mean[:, ti, di].tolist(),
                    "cov_lower": forecast.cov[:, :, ti, di][tril].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")
