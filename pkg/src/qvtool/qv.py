"""Kernel estimators of the derivative of the limit path and of its
quadratic variation, computed from the observed path ``X`` alone.

All functions accept ``x`` of shape ``(N+1,)`` or ``(M, N+1)`` sampled on a
:class:`~qvtool.sim.TimeGrid`; batches are processed row by row with no
interaction between rows.

Discretisation
--------------
A stochastic integral ``int k(t) dX_t`` against a deterministic weight is
approximated by treating ``X`` as piecewise linear between samples::

    sum_k (X[k+1] - X[k]) / h * int_{t_k}^{t_{k+1}} k(t) dt

The cell integrals are exact for polynomial kernels, so a linear ``X``
is differentiated without error.  Weights depend on time only, hence each
sum is non-anticipating in the data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

from .errors import DataError, DomainError, PreconditionError, SingularWeightError
from .fields import ScalarField
from .kernels import Kernel, default_pair, require_valid
from .sim import TimeGrid


class ResolutionWarning(UserWarning):
    """Fewer samples per smoothing window than recommended."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Bandwidth, kernel pair, evaluation time and optional weight ``g``.

    Construction validates both kernels; an invalid kernel is rejected here
    so that no estimator ever runs with one.
    """

    tau: float
    bandwidth: float
    k_star: Kernel
    k: Kernel
    weight: ScalarField | Callable | None = None
    min_samples: int = 20
    warn_samples: int = 50

    def __post_init__(self) -> None:
        if self.k_star.side != "left" or self.k.side != "right":
            raise ValueError("k_star must be a left kernel and k a right kernel")
        require_valid(self.k_star)
        require_valid(self.k)
        if not self.bandwidth > 0:
            raise DomainError("bandwidth must be positive")
        if self.tau < self.bandwidth * (1 - 1e-12):
            raise DomainError(f"tau={self.tau} is shorter than the bandwidth {self.bandwidth}")

    @classmethod
    def default(cls, tau: float, eps: float, degree: int = 1, vanish: bool = False,
                bandwidth: float | None = None, weight=None) -> EstimatorConfig:
        """Bandwidth ``phi = eps`` unless given."""
        ks, k = default_pair(degree, vanish)
        return cls(tau, eps if bandwidth is None else bandwidth, ks, k, weight)


def _increments(x, grid: TimeGrid, weight=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != grid.N + 1:
        raise DataError(f"path has {x.shape[-1]} samples, grid expects {grid.N + 1}")
    if not np.all(np.isfinite(x)):
        raise DataError("observed path contains NaN or inf")
    dx = np.diff(x, axis=-1)
    if weight is not None:
        dx = dx * np.asarray(weight(grid.times[:-1]), dtype=float)
    return dx


def _check_resolution(cfg: EstimatorConfig, grid: TimeGrid) -> None:
    per_window = cfg.bandwidth / grid.h
    if per_window < cfg.min_samples:
        raise DomainError(f"only {per_window:.1f} samples per window; need >= {cfg.min_samples}")
    if per_window < cfg.warn_samples:
        warnings.warn(f"{per_window:.1f} samples per window (< {cfg.warn_samples}); "
                      "discretisation error may be visible", ResolutionWarning, stacklevel=3)


def _cell_weights(kernel: Kernel, grid: TimeGrid, center: float, phi: float):
    """Index range and weights of ``(1/phi) int K((t - center)/phi) dX_t``."""
    lo, hi = kernel.support
    k0 = max(0, int(math.floor((center + lo * phi) / grid.h + 1e-9)))
    k1 = min(grid.N, int(math.ceil((center + hi * phi) / grid.h - 1e-9)))
    tk = np.arange(k0, k1 + 1) * grid.h
    A = kernel.cumulative((tk - center) / phi)
    return k0, k1, np.diff(A) / grid.h


def endpoint_derivative(x, grid: TimeGrid, cfg: EstimatorConfig, tau: float | None = None,
                        weight=None):
    """Left-kernel estimate of the derivative at the end of ``[0, tau]``.

    ``(1/phi) int_0^tau K*((s - tau)/phi) dX_s``, using data from
    ``[tau - phi, tau]`` only.
    """
    tau = cfg.tau if tau is None else tau
    phi = cfg.bandwidth
    if tau - phi < -1e-12 * grid.T or tau > grid.T * (1 + 1e-12):
        raise DomainError(f"window [{tau - phi:g}, {tau:g}] leaves [0, {grid.T:g}]")
    dx = _increments(x, grid, weight)
    k0, k1, w = _cell_weights(cfg.k_star, grid, tau, phi)
    return np.sum(dx[..., k0:k1] * w, axis=-1)


def smooth_derivative(x, grid: TimeGrid, cfg: EstimatorConfig, t: float, weight=None):
    """Right-kernel estimate ``(1/phi) int K((s - t)/phi) dX_s`` on ``[t, t + phi]``."""
    phi = cfg.bandwidth
    if t < -1e-12 * grid.T or t + phi > grid.T * (1 + 1e-12):
        raise DomainError(f"window [{t:g}, {t + phi:g}] leaves [0, {grid.T:g}]")
    dx = _increments(x, grid, weight)
    k0, k1, w = _cell_weights(cfg.k, grid, t, phi)
    return np.sum(dx[..., k0:k1] * w, axis=-1)


def _shift_weights(kernel: Kernel, grid: TimeGrid, phi: float):
    # Weights for a right window starting exactly at a grid point; they do
    # not depend on which grid point, so the sweep is a correlation.
    L = int(math.ceil(phi / grid.h - 1e-9)) + 1
    u = np.arange(L + 1) * grid.h / phi
    w_val = np.diff(kernel.cumulative(u)) / grid.h
    w_der = -np.diff(kernel.clipped_poly(u)) / (phi * grid.h)
    nz = np.nonzero((w_val != 0) | (w_der != 0))[0]
    L = int(nz[-1]) + 1 if len(nz) else 1
    return w_val[:L], w_der[:L]


def _correlate(dx: np.ndarray, w: np.ndarray, count: int) -> np.ndarray:
    L = len(w)
    seg = dx[..., : count + L - 1]
    kern = w[::-1]
    # row by row, so a path's result does not depend on the batch it came in
    out = np.empty(seg.shape[:-1] + (count,))
    for idx in np.ndindex(seg.shape[:-1]):
        out[idx] = fftconvolve(seg[idx], kern, mode="valid")[:count]
    return out


@dataclass(frozen=True)
class QVComponents:
    """Pieces of the quadratic-variation estimate, for diagnostics.

    ``s`` are the grid times of the outer integral, ``n_path``/``dn_path``
    the smoothed derivative and its exact ``s``-derivative there.
    """

    endpoint: np.ndarray | float
    s: np.ndarray
    n_path: np.ndarray
    dn_path: np.ndarray
    integral: np.ndarray | float

    @property
    def estimate(self):
        return self.endpoint ** 2 - 2.0 * self.integral


def qv_components(x, grid: TimeGrid, cfg: EstimatorConfig, weight=None) -> QVComponents:
    """Evaluate ``Nbar^2 - 2 int_0^{tau - phi} N_s N'_s ds`` piece by piece.

    ``N'_s = -(1/phi^2) int K'((t - s)/phi) dX_t`` uses the exact polynomial
    derivative of ``K``; the outer integral is a trapezoid sum over the grid
    points of ``[0, tau - phi]`` so that every right window fits inside
    ``[0, tau]``.
    """
    _check_resolution(cfg, grid)
    x = np.asarray(x, dtype=float)
    nbar = endpoint_derivative(x, grid, cfg, weight=weight)
    dx = _increments(x, grid, weight)
    phi = cfg.bandwidth
    J = int(math.floor((cfg.tau - phi) / grid.h + 1e-9))
    w_val, w_der = _shift_weights(cfg.k, grid, phi)
    count = J + 1
    n_path = _correlate(dx, w_val, count)
    dn_path = _correlate(dx, w_der, count)
    prod = n_path * dn_path
    if count >= 2:
        integral = grid.h * (prod.sum(axis=-1) - 0.5 * (prod[..., 0] + prod[..., -1]))
    else:
        integral = np.zeros(prod.shape[:-1])
    s = np.arange(count) * grid.h
    if np.ndim(integral) == 0:
        integral = float(integral)
        nbar = float(nbar)
    return QVComponents(nbar, s, n_path, dn_path, integral)


def qv_estimate(x, grid: TimeGrid, cfg: EstimatorConfig):
    """Kernel estimate of the quadratic variation ``int_0^tau f^2 b^2 dt``."""
    return qv_components(x, grid, cfg).estimate


def weighted_qv_estimate(x, grid: TimeGrid, cfg: EstimatorConfig):
    """As :func:`qv_estimate` with every increment ``dX_k`` scaled by ``g(t_k)``.

    Targets ``int_0^tau g^2 f^2 b^2 dt``.  Without a weight in ``cfg`` the
    result equals :func:`qv_estimate` exactly.
    """
    return qv_components(x, grid, cfg, weight=cfg.weight).estimate


def _inverse_weight(known, grid: TimeGrid, cfg: EstimatorConfig, name: str):
    if getattr(known, "is_parametric", False):
        raise PreconditionError(f"{name} must be a known (theta-free) function")
    if getattr(known, "smoothness", "C2") != "C2":
        raise PreconditionError(f"{name} must be twice continuously differentiable")
    t = grid.times[grid.times <= cfg.tau + 1e-12]
    vals = np.asarray(known(t), dtype=float)
    if np.min(np.abs(vals)) < 1e-8:
        raise SingularWeightError(f"inf |{name}| on [0, tau] is below 1e-8")
    return lambda s: 1.0 / np.asarray(known(s), dtype=float)


def estimate_int_b2(x, grid: TimeGrid, cfg: EstimatorConfig, f_known):
    """Estimate ``int_0^tau b^2 dt`` when ``f`` is known (weight ``1/f``)."""
    g = _inverse_weight(f_known, grid, cfg, "f")
    return qv_components(x, grid, cfg, weight=g).estimate


def estimate_int_f2(x, grid: TimeGrid, cfg: EstimatorConfig, b_known):
    """Estimate ``int_0^tau f^2 dt`` when ``b`` is known (weight ``1/b``)."""
    g = _inverse_weight(b_known, grid, cfg, "b")
    return qv_components(x, grid, cfg, weight=g).estimate
