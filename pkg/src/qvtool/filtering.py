"""Kalman--Bucy filter, likelihood, Fisher information and the estimators
built on them (grid MLE, Bayes, one-step MLE process, adaptive filter).

Numerics
--------
All recursions substep the observation grid at ``h_f = min(h, eps/200)``;
the observed increment of a grid step is spread evenly over its substeps.

* The variance ``gamma`` solves the Riccati equation by classical RK4.  Its
  parameter derivative is co-integrated with the same RK4 stages, so it is
  the exact derivative of the discrete scheme.
* The mean uses an exponential integrator: over a substep the coefficients
  are frozen at the left point and the linear equation
  ``dm = -q m dt + G dX`` is solved exactly for an observation that is
  linear within the substep::

      m <- exp(-q h_f) m + G * phi1(q h_f) * dX_sub,  phi1(z) = (1 - e^-z)/z

  with ``q = a + gamma f^2/(eps^2 sigma^2)`` and ``G = gamma f/(eps^2 sigma^2)``.
  The parameter sensitivity ``dm/dtheta`` differentiates this update.

Arrays are time-major internally and batch-first in the public results,
matching :class:`~qvtool.sim.PathPair`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import (DomainError, PreconditionError, ShapeError, SingularInformationError,
                     StiffnessError, UnsupportedOperationError)
from .model import SystemSpec, integrate_time
from .sim import TimeGrid


class NumericalDegeneracyWarning(RuntimeWarning):
    """Posterior mass collapsed onto a single quadrature node."""


def substeps(grid: TimeGrid, eps: float) -> int:
    """Number of filter substeps per grid step, ``ceil(h / min(h, eps/200))``."""
    if not eps > 0:
        raise DomainError("filtering needs eps > 0")
    hf = min(grid.h, eps / 200.0)
    return max(1, int(math.ceil(grid.h / hf - 1e-9)))


def gamma_inf(a: float, b: float, f: float, sigma: float, eps: float) -> float:
    """Stationary Riccati solution for constant coefficients."""
    r = (eps * sigma / f) ** 2
    return r * (-a + math.sqrt(a * a + (f * b) ** 2 / (eps * sigma) ** 2))


# --------------------------------------------------------------------------
# integration engine
# --------------------------------------------------------------------------

class _Stage:
    """Coefficients at one set of stage times, shaped ``(n, *batch)``."""

    __slots__ = ("a", "bb", "c", "g", "ad", "bbd", "cd", "gd")

    def __init__(self, spec: SystemSpec, t, th, eps: float, sens: bool):
        tt = t.reshape(t.shape + (1,) * (th.ndim - 1))
        shape = th.shape
        a = spec.a.value(tt, th)
        b = spec.b.value(tt, th)
        f = spec.f.value(tt, th)
        inv = 1.0 / (eps * eps * spec.sigma(tt) ** 2)
        self.a = np.broadcast_to(a, shape)
        self.bb = np.broadcast_to(b * b, shape)
        self.c = np.broadcast_to(f * f * inv, shape)
        self.g = np.broadcast_to(f * inv, shape)
        if sens:
            fd = spec.f.dtheta(tt, th)
            self.ad = np.broadcast_to(spec.a.dtheta(tt, th), shape)
            self.bbd = np.broadcast_to(2.0 * b * spec.b.dtheta(tt, th), shape)
            self.cd = np.broadcast_to(2.0 * f * fd * inv, shape)
            self.gd = np.broadcast_to(fd * inv, shape)


def _riccati_rhs(g, a, bb, c):
    return bb - 2.0 * a * g - c * g * g


def _riccati_rhs_dot(g, gd, a, bb, c, ad, bbd, cd):
    return bbd - 2.0 * ad * g - 2.0 * a * gd - cd * g * g - 2.0 * c * g * gd


def _mean_step(m, md, gam, gd, L: _Stage, i: int, dxs, hf: float, sens: bool):
    """Exponential-integrator update of the mean (and its sensitivity)."""
    q = L.a[i] + gam * L.c[i]
    G = gam * L.g[i]
    z = q * hf
    E = np.exp(-z)
    small = np.abs(z) < 1e-8
    zs = np.where(small, 1.0, z)
    p1 = np.where(small, 1.0 - 0.5 * z, -np.expm1(-z) / zs)
    m_new = E * m + G * p1 * dxs
    if not sens:
        return m_new, md
    qd = L.ad[i] + gd * L.c[i] + gam * L.cd[i]
    Gd = gd * L.g[i] + gam * L.gd[i]
    p1d = np.where(small, -0.5 + z / 3.0, (E - p1) / zs)
    md_new = E * md - hf * qd * E * m + (Gd * p1 + G * p1d * hf * qd) * dxs
    return m_new, md_new


@dataclass
class _EngineOut:
    gamma: np.ndarray
    gamma_dot: np.ndarray | None
    m: np.ndarray | None
    m_dot: np.ndarray | None
    gamma_fine: np.ndarray | None
    floor_hits: int


def _engine(spec: SystemSpec, eps: float, grid: TimeGrid, theta_steps: np.ndarray,
            dx: np.ndarray | None = None, *, sens: bool = False, table=None,
            keep_fine: bool = False, nsub: int | None = None) -> _EngineOut:
    """Run the filter recursions over the whole grid.

    ``theta_steps`` has shape ``(N, *batch)`` and gives the parameter used
    on each grid step.  ``dx`` (same leading shape) are the observed
    increments; without it only the Riccati equation is solved.  ``table``
    is ``(nodes, gamma_fine)`` and replaces the Riccati integration by
    linear interpolation in the parameter.
    """
    nsub = substeps(grid, eps) if nsub is None else nsub
    N = grid.N
    hf = grid.h / nsub
    shape = theta_steps.shape[1:]
    if table is not None and sens:
        raise UnsupportedOperationError("sensitivities need an integrated Riccati equation")
    gam = np.zeros(shape)
    gd = np.zeros(shape)
    m = np.zeros(shape)
    md = np.zeros(shape)
    out_g = np.zeros((N + 1,) + shape)
    out_gd = np.zeros((N + 1,) + shape) if sens else None
    out_m = np.zeros((N + 1,) + shape) if dx is not None else None
    out_md = np.zeros((N + 1,) + shape) if (dx is not None and sens) else None
    fine = np.zeros((N * nsub + 1,) + shape) if keep_fine else None
    floor_hits = 0
    steps_per_block = max(1, 1024 // nsub)
    for k0 in range(0, N, steps_per_block):
        k1 = min(N, k0 + steps_per_block)
        nb = (k1 - k0) * nsub
        j0 = k0 * nsub
        tl = (j0 + np.arange(nb)) * hf
        th = np.repeat(theta_steps[k0:k1], nsub, axis=0)
        L = _Stage(spec, tl, th, eps, sens)
        if table is None:
            Mi = _Stage(spec, tl + 0.5 * hf, th, eps, sens)
            R = _Stage(spec, tl + hf, th, eps, sens)
        else:
            nodes, gfine = table
            idx = np.clip(np.searchsorted(nodes, th, side="right") - 1, 0, len(nodes) - 2)
            w = (th - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
            rows = (j0 + np.arange(nb)).reshape((nb,) + (1,) * len(shape))
            g0 = gfine[rows, idx]
            g_table = g0 + w * (gfine[rows, idx + 1] - g0)
        dxs = None
        if dx is not None:
            dxs = np.repeat(dx[k0:k1], nsub, axis=0) / nsub
        for i in range(nb):
            if table is not None:
                gam = g_table[i]
                if (j0 + i) % nsub == 0:
                    out_g[(j0 + i) // nsub] = gam
            if dxs is not None:
                m, md = _mean_step(m, md, gam, gd, L, i, dxs[i], hf, sens)
            if table is None:
                a1, bb1, c1 = L.a[i], L.bb[i], L.c[i]
                a2, bb2, c2 = Mi.a[i], Mi.bb[i], Mi.c[i]
                a4, bb4, c4 = R.a[i], R.bb[i], R.c[i]
                k1_ = _riccati_rhs(gam, a1, bb1, c1)
                g2 = gam + 0.5 * hf * k1_
                k2_ = _riccati_rhs(g2, a2, bb2, c2)
                g3 = gam + 0.5 * hf * k2_
                k3_ = _riccati_rhs(g3, a2, bb2, c2)
                g4 = gam + hf * k3_
                k4_ = _riccati_rhs(g4, a4, bb4, c4)
                g_new = gam + hf / 6.0 * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_)
                if sens:
                    l1 = _riccati_rhs_dot(gam, gd, a1, bb1, c1, L.ad[i], L.bbd[i], L.cd[i])
                    d2 = gd + 0.5 * hf * l1
                    l2 = _riccati_rhs_dot(g2, d2, a2, bb2, c2, Mi.ad[i], Mi.bbd[i], Mi.cd[i])
                    d3 = gd + 0.5 * hf * l2
                    l3 = _riccati_rhs_dot(g3, d3, a2, bb2, c2, Mi.ad[i], Mi.bbd[i], Mi.cd[i])
                    d4 = gd + hf * l3
                    l4 = _riccati_rhs_dot(g4, d4, a4, bb4, c4, R.ad[i], R.bbd[i], R.cd[i])
                    gd = gd + hf / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
                neg = g_new < 0
                if np.any(neg):
                    floor_hits += int(np.count_nonzero(neg))
                    g_new = np.where(neg, 0.0, g_new)
                    if sens:
                        gd = np.where(neg, 0.0, gd)
                gam = g_new
            j = j0 + i + 1
            if keep_fine:
                fine[j] = gam
            if j % nsub == 0:
                k = j // nsub
                if table is None:
                    out_g[k] = gam
                    if sens:
                        out_gd[k] = gd
                if dxs is not None:
                    out_m[k] = m
                    if sens:
                        out_md[k] = md
        if table is None:
            bound = hf * (2.0 * np.max(np.abs(R.a)) + 2.0 * np.max(R.c) * np.max(gam))
            if not np.all(np.isfinite(gam)) or bound > 2.5:
                raise StiffnessError(f"Riccati recursion unstable near t={k1 * grid.h:.4g}; "
                                     "use a finer grid (smaller h)")
        if dxs is not None and not np.all(np.isfinite(m)):
            raise StiffnessError(f"filter mean diverged near t={k1 * grid.h:.4g}; "
                                 "use a finer grid (smaller h)")
    if table is not None:
        nodes, gfine = table
        th = theta_steps[-1]
        idx = np.clip(np.searchsorted(nodes, th, side="right") - 1, 0, len(nodes) - 2)
        w = (th - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
        g0 = gfine[-1][idx]
        out_g[N] = g0 + w * (gfine[-1][idx + 1] - g0)
    return _EngineOut(out_g, out_gd, out_m, out_md, fine, floor_hits)


# --------------------------------------------------------------------------
# public filter API
# --------------------------------------------------------------------------

def _theta(spec: SystemSpec, theta) -> np.ndarray:
    if spec.is_parametric:
        return np.asarray(spec.resolve_theta(theta), dtype=float)
    return np.asarray(0.0 if theta is None else theta, dtype=float)


def _eps(spec: SystemSpec, eps) -> float:
    e = spec.eps if eps is None else float(eps)
    if not e > 0:
        raise DomainError("filtering needs eps > 0")
    return e


def _time_major_dx(x, grid: TimeGrid) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != grid.N + 1:
        raise ShapeError(f"path has {x.shape[-1]} samples, grid expects {grid.N + 1}")
    if x.ndim > 2:
        raise ShapeError("path must be 1-D or a 2-D batch")
    return np.moveaxis(np.diff(x, axis=-1), -1, 0)


def _broadcast_dx(dx: np.ndarray, shape: tuple) -> np.ndarray:
    """Broadcast time-major increments to ``(N, *shape)``, batch axes right-aligned."""
    pad = (1,) * (len(shape) - (dx.ndim - 1))
    return np.broadcast_to(dx.reshape(dx.shape[:1] + pad + dx.shape[1:]), dx.shape[:1] + shape)


def _batch_first(a):
    return None if a is None else np.ascontiguousarray(np.moveaxis(a, 0, -1))


@dataclass(frozen=True)
class RiccatiSolution:
    """Conditional variance on the grid (and optionally every substep)."""

    grid: TimeGrid
    eps: float
    theta: np.ndarray
    nsub: int
    gamma: np.ndarray
    gamma_dot: np.ndarray | None = None
    gamma_fine: np.ndarray | None = None
    floor_hits: int = 0


def solve_riccati(spec: SystemSpec, theta=None, eps: float | None = None,
                  grid: TimeGrid | None = None, *, sens: bool = False,
                  keep_fine: bool = False) -> RiccatiSolution:
    """Integrate ``gamma' = -2 a gamma - gamma^2 f^2/(eps^2 sigma^2) + b^2``, ``gamma(0) = 0``.

    ``theta`` may be an array; the output then has the batch axis first.
    ``gamma_fine`` (time-major, every substep) is kept on request.
    """
    eps = _eps(spec, eps)
    grid = TimeGrid.default(spec.T, eps) if grid is None else grid
    th = _theta(spec, theta)
    steps = np.broadcast_to(th, (grid.N,) + th.shape)
    out = _engine(spec, eps, grid, steps, sens=sens, keep_fine=keep_fine)
    return RiccatiSolution(grid, eps, th, substeps(grid, eps), _batch_first(out.gamma),
                           _batch_first(out.gamma_dot), out.gamma_fine, out.floor_hits)


@dataclass(frozen=True)
class FilterPath:
    """Filter output on the observation grid.

    ``m`` and ``gamma`` have shape ``(N+1,)`` or ``(M, N+1)``.  ``m_dot`` is
    the parameter sensitivity when requested; ``theta_used`` is the
    parameter (scalar, per batch row, or per grid step for the adaptive
    filter).
    """

    grid: TimeGrid
    eps: float
    theta_used: np.ndarray
    m: np.ndarray
    gamma: np.ndarray
    m_dot: np.ndarray | None = None
    gamma_dot: np.ndarray | None = None
    floor_hits: int = 0

    @property
    def t(self) -> np.ndarray:
        return self.grid.times

    def to_csv(self, path, theta_star=None) -> None:
        """Write ``t,m,gamma[,mdot][,theta_star]`` for one replication."""
        if self.m.ndim != 1:
            raise ShapeError("CSV export handles one replication at a time")
        cols, names = [self.t, self.m, self.gamma], ["t", "m", "gamma"]
        if self.m_dot is not None:
            cols.append(self.m_dot)
            names.append("mdot")
        if theta_star is not None:
            cols.append(np.asarray(theta_star, dtype=float))
            names.append("theta_star")
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names),
                   comments="", fmt="%.17g")


def kalman_bucy(spec: SystemSpec, x, grid: TimeGrid, theta=None, eps: float | None = None,
                *, sens: bool = False) -> FilterPath:
    """Conditional mean ``m(theta, t)`` of the hidden state given ``X`` up to ``t``.

    ``x`` is one path or a batch ``(M, N+1)``; ``theta`` a scalar or a
    vector broadcasting against the batch (e.g. many parameters for one
    path).  With ``sens`` the sensitivities ``dm/dtheta`` and
    ``dgamma/dtheta`` are co-integrated.
    """
    eps = _eps(spec, eps)
    th = _theta(spec, theta)
    dx = _time_major_dx(x, grid)
    try:
        shape = np.broadcast_shapes(th.shape, dx.shape[1:])
    except ValueError:
        raise ShapeError(f"theta shape {th.shape} does not match batch {dx.shape[1:]}") from None
    steps = np.broadcast_to(th, (grid.N,) + shape)
    dx = _broadcast_dx(dx, shape)
    out = _engine(spec, eps, grid, steps, dx, sens=sens)
    return FilterPath(grid, eps, th, _batch_first(out.m), _batch_first(out.gamma),
                      _batch_first(out.m_dot), _batch_first(out.gamma_dot), out.floor_hits)


def filter_sensitivity(spec: SystemSpec, x, grid: TimeGrid, theta=None,
                       eps: float | None = None) -> FilterPath:
    """:func:`kalman_bucy` with the parameter sensitivities filled in."""
    if not spec.is_parametric:
        fp = kalman_bucy(spec, x, grid, theta, eps)
        return FilterPath(fp.grid, fp.eps, fp.theta_used, fp.m, fp.gamma,
                          np.zeros_like(fp.m), np.zeros_like(fp.gamma), fp.floor_hits)
    return kalman_bucy(spec, x, grid, theta, eps, sens=True)


def kalman_bucy_by_parts(spec: SystemSpec, x, grid: TimeGrid, theta=None,
                         eps: float | None = None) -> np.ndarray:
    """Cross-check of the filter mean that never uses the increments of ``X``.

    Integrating the stochastic integral by parts gives
    ``m_t = G_t X_t - J_t`` with ``J' = -q J + X (q G + G')``, ``J_0 = 0``,
    which only needs the observed path values.  Implemented for constant
    coefficients, where ``G' = gamma' f/(eps^2 sigma^2)`` follows from the
    Riccati right-hand side.
    """
    for fld in (spec.a, spec.b, spec.f, spec.sigma):
        fam = getattr(fld, "family", None)
        if fam not in ("constant", "scale") or (fam == "scale" and fld.parts[0].family != "constant"):
            raise UnsupportedOperationError("by-parts cross-check needs constant coefficients")
    eps = _eps(spec, eps)
    th = _theta(spec, theta)
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != grid.N + 1:
        raise ShapeError("by-parts cross-check takes one path on the grid")
    a = float(spec.a.value(0.0, th))
    b = float(spec.b.value(0.0, th))
    f = float(spec.f.value(0.0, th))
    s = float(spec.sigma(0.0))
    rs = solve_riccati(spec, th, eps, grid, keep_fine=True)
    nsub = rs.nsub
    hf = grid.h / nsub
    gam = rs.gamma_fine
    c = f * f / (eps * eps * s * s)
    gpr = b * b - 2.0 * a * gam - c * gam * gam
    G = gam * f / (eps * eps * s * s)
    Gp = gpr * f / (eps * eps * s * s)
    q = a + gam * c
    tf = np.arange(len(gam)) * hf
    X = np.interp(tf, grid.times, x)
    r = X * (q * G + Gp)
    J = np.zeros_like(gam)
    for j in range(len(gam) - 1):
        qm = 0.5 * (q[j] + q[j + 1])
        z = qm * hf
        p1 = -math.expm1(-z) / z if z > 1e-8 else 1.0 - 0.5 * z
        J[j + 1] = math.exp(-z) * J[j] + hf * p1 * 0.5 * (r[j] + r[j + 1])
    m = G * X - J
    return m[::nsub]


# --------------------------------------------------------------------------
# likelihood and reference estimators
# --------------------------------------------------------------------------

def _innovation_terms(spec: SystemSpec, fp: FilterPath, x, grid: TimeGrid, theta, eps: float):
    th = _theta(spec, theta)
    tk = grid.times[:-1]
    tcol = tk if th.ndim == 0 else tk[None, :]
    thcol = th if th.ndim == 0 else th[:, None]
    f = spec.f.value(tcol, thcol)
    inv = 1.0 / (eps * eps * spec.sigma(tk) ** 2)
    Mk = f * fp.m[..., :-1]
    dx = np.diff(np.asarray(x, dtype=float), axis=-1)
    Mdot = None
    if fp.m_dot is not None:
        Mdot = spec.f.dtheta(tcol, thcol) * fp.m[..., :-1] + f * fp.m_dot[..., :-1]
    return Mk, Mdot, dx, inv


def log_likelihood(spec: SystemSpec, theta, x, grid: TimeGrid, eps: float | None = None,
                   *, gradient: bool = False):
    """Log-likelihood ratio ``sum M dX/(eps^2 sigma^2) - sum M^2 h/(2 eps^2 sigma^2)``.

    With ``gradient`` a pair ``(value, d value/d theta)`` is returned, the
    derivative coming from the filter sensitivities.
    """
    eps = _eps(spec, eps)
    fp = kalman_bucy(spec, x, grid, theta, eps, sens=gradient and spec.is_parametric)
    Mk, Mdot, dx, inv = _innovation_terms(spec, fp, x, grid, theta, eps)
    h = grid.h
    val = np.sum(Mk * dx * inv, axis=-1) - 0.5 * h * np.sum(Mk * Mk * inv, axis=-1)
    val = float(val) if np.ndim(val) == 0 else val
    if not gradient:
        return val
    if Mdot is None:
        return val, 0.0 * val
    grad = np.sum(Mdot * dx * inv, axis=-1) - h * np.sum(Mk * Mdot * inv, axis=-1)
    return val, (float(grad) if np.ndim(grad) == 0 else grad)


@dataclass(frozen=True)
class MLEResult:
    theta: float
    loglik: float
    at_boundary: bool
    grid_thetas: np.ndarray
    grid_loglik: np.ndarray


def mle_grid(spec: SystemSpec, x, grid: TimeGrid, thetas=None, *, n_grid: int = 64,
             refine: bool = True, eps: float | None = None, tol: float = 1e-6) -> MLEResult:
    """Maximise the likelihood on a grid over the parameter interval.

    The coarse argmax is refined by golden-section search between its
    neighbours.  A maximum on the first or last grid point is returned
    unrefined with ``at_boundary`` set.
    """
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("mle_grid takes one path")
    th = (np.linspace(spec.theta.alpha, spec.theta.beta, n_grid) if thetas is None
          else np.atleast_1d(np.asarray(thetas, dtype=float)))
    ll = np.atleast_1d(log_likelihood(spec, th, x, grid, eps))
    i = int(np.argmax(ll))
    if len(th) == 1:
        return MLEResult(float(th[0]), float(ll[0]), False, th, ll)
    if i in (0, len(th) - 1) or not refine:
        return MLEResult(float(th[i]), float(ll[i]), i in (0, len(th) - 1), th, ll)
    lo, hi = float(th[i - 1]), float(th[i + 1])
    ratio = (math.sqrt(5.0) - 1.0) / 2.0

    def ll_at(v):
        return log_likelihood(spec, v, x, grid, eps)

    c = hi - ratio * (hi - lo)
    d = lo + ratio * (hi - lo)
    fc, fd = ll_at(c), ll_at(d)
    while hi - lo > tol:
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - ratio * (hi - lo)
            fc = ll_at(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + ratio * (hi - lo)
            fd = ll_at(d)
    best = 0.5 * (lo + hi)
    fb = ll_at(best)
    if fb < ll[i]:
        best, fb = float(th[i]), float(ll[i])
    return MLEResult(best, fb, False, th, ll)


def _simpson_weights(n_intervals: int, width: float) -> np.ndarray:
    if n_intervals % 2:
        raise ValueError("composite Simpson needs an even number of intervals")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * width / (3.0 * n_intervals)


def bayes_estimator(spec: SystemSpec, x, grid: TimeGrid, prior=None, *, n_intervals: int = 256,
                    eps: float | None = None) -> float:
    """Posterior mean of the parameter under ``prior`` (uniform by default).

    Composite Simpson quadrature on ``[alpha, beta]``; the likelihood is
    combined in the log domain.
    """
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    lo, hi = spec.theta.alpha, spec.theta.beta
    nodes = np.linspace(lo, hi, n_intervals + 1)
    w = _simpson_weights(n_intervals, hi - lo)
    ll = np.asarray(log_likelihood(spec, nodes, x, grid, eps))
    dens = np.ones_like(nodes) if prior is None else np.asarray(prior(nodes), dtype=float)
    if np.any(dens < 0) or not np.any(dens > 0):
        raise DomainError("prior density must be non-negative and not identically zero")
    with np.errstate(divide="ignore"):
        lw = ll + np.log(dens)
    den = logsumexp(lw, b=w)
    num, sign = logsumexp(lw, b=w * nodes, return_sign=True)
    finite = lw[np.isfinite(lw)]
    if len(finite) == 1 or np.sort(finite)[-2] - finite.max() < math.log(np.finfo(float).eps):
        warnings.warn("posterior mass sits on a single quadrature node; "
                      "the estimate equals that node", NumericalDegeneracyWarning, stacklevel=2)
    return float(sign * math.exp(num - den))


# --------------------------------------------------------------------------
# Fisher information
# --------------------------------------------------------------------------

def _S(spec, t, th):
    return spec.f.value(t, th) * spec.b.value(t, th)


def _S_dot(spec, t, th):
    return (spec.f.dtheta(t, th) * spec.b.value(t, th)
            + spec.f.value(t, th) * spec.b.dtheta(t, th))


def _info_density(spec: SystemSpec, t, th):
    return _S_dot(spec, t, th) ** 2 / (2.0 * _S(spec, t, th) * spec.sigma(t))


def fisher_information(spec: SystemSpec, theta: float, tau: float, t: float) -> float:
    """``int_tau^t Sdot^2/(2 S sigma) ds`` with ``S = f b``."""
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    if not 0 <= tau <= t <= spec.T * (1 + 1e-12):
        raise DomainError(f"need 0 <= tau <= t <= T, got tau={tau}, t={t}")
    s = np.linspace(tau, t, 257)
    if np.min(_S(spec, s, theta)) <= 1e-12:
        raise SingularInformationError("S = f b is not positive on [tau, t]")
    return integrate_time(lambda u: _info_density(spec, u, theta), tau, t, spec)


@dataclass(frozen=True)
class InfoProfile:
    """Cumulative information ``I_tau^t`` on the grid (zero for ``t <= tau``)."""

    grid: TimeGrid
    tau: float
    tau_index: int
    theta: np.ndarray
    cumulative: np.ndarray

    @property
    def total(self):
        return self.cumulative[..., -1]


def info_profile(spec: SystemSpec, theta, tau: float, grid: TimeGrid) -> InfoProfile:
    """Trapezoid accumulation of the information density from ``tau``."""
    th = np.asarray(theta, dtype=float)
    k_tau = int(round(tau / grid.h))
    if abs(k_tau * grid.h - tau) > 1e-9 * max(1.0, tau) or not 0 <= k_tau < grid.N:
        raise DomainError(f"tau={tau} must be a grid point inside [0, T)")
    t = grid.times[k_tau:]
    tcol = t if th.ndim == 0 else t[None, :]
    thcol = th if th.ndim == 0 else th[:, None]
    S = _S(spec, tcol, thcol)
    if np.min(S) <= 1e-12:
        raise SingularInformationError("S = f b is not positive after tau")
    dens = np.broadcast_to(_info_density(spec, tcol, thcol), np.shape(S))
    cum = np.zeros(th.shape + (grid.N + 1,))
    inc = 0.5 * grid.h * (dens[..., 1:] + dens[..., :-1])
    cum[..., k_tau + 1:] = np.cumsum(inc, axis=-1)
    return InfoProfile(grid, tau, k_tau, th, cum)


# --------------------------------------------------------------------------
# one-step MLE process and adaptive filter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OneStepResult:
    """Parameter trajectory ``theta*_t`` on the grid.

    Entries at ``t <= tau`` and where the accumulated information is below
    the floor are NaN.  ``clamped`` marks entries pushed back into
    ``[alpha, beta]``.
    """

    grid: TimeGrid
    tau: float
    theta_check: np.ndarray
    theta_star: np.ndarray
    clamped: np.ndarray
    score: np.ndarray
    info: InfoProfile
    filter: FilterPath

    @property
    def theta_final(self):
        return self.theta_star[..., -1]

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.theta_star)


def one_step_mle_process(spec: SystemSpec, x, grid: TimeGrid, theta_check, tau: float,
                         eps: float | None = None, *, info_floor: float = 0.05,
                         check_clamped=None) -> OneStepResult:
    """Fisher-scoring update of a preliminary estimate, for every ``t > tau``.

    ``theta*_t = theta_check + score_t / I_tau^t(theta_check)`` with the score
    ``int_tau^t Mdot/(eps sigma^2) (dX - M ds)`` accumulated on the grid.

    Raises
    ------
    PreconditionError
        If any preliminary estimate sits on the interval boundary or
        ``check_clamped`` flags it as clamped.
    """
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    eps = _eps(spec, eps)
    th = np.asarray(theta_check, dtype=float)
    lo, hi = spec.theta.alpha, spec.theta.beta
    if np.any(th <= lo) or np.any(th >= hi):
        raise PreconditionError("preliminary estimate must lie strictly inside (alpha, beta)")
    if check_clamped is not None and np.any(np.asarray(check_clamped, dtype=bool)):
        raise PreconditionError("preliminary estimate was clamped")
    prof = info_profile(spec, th, tau, grid)
    fp = kalman_bucy(spec, x, grid, th, eps, sens=True)
    Mk, Mdot, dx, _ = _innovation_terms(spec, fp, x, grid, th, eps)
    s2 = spec.sigma(grid.times[:-1]) ** 2
    inc = Mdot / (eps * s2) * (dx - Mk * grid.h)
    k_tau = prof.tau_index
    score = np.zeros(inc.shape[:-1] + (grid.N + 1,))
    score[..., k_tau + 1:] = np.cumsum(inc[..., k_tau:], axis=-1)
    info = prof.cumulative
    ok = info >= info_floor * info[..., -1:]
    ok[..., : k_tau + 1] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(ok, th[..., None] + score / np.where(ok, info, 1.0), np.nan)
    low, high = raw < lo, raw > hi
    star = np.where(low, lo, np.where(high, hi, raw))
    return OneStepResult(grid, tau, th, star, low | high, score, prof, fp)


def adaptive_filter(spec: SystemSpec, x, grid: TimeGrid, theta_star, tau: float,
                    theta_check, eps: float | None = None, *, mode: str = "precomputed",
                    n_nodes: int = 129, extra_nodes=()) -> FilterPath:
    """Kalman--Bucy filter with the parameter replaced online by ``theta_star``.

    On grid step ``[t_k, t_{k+1})`` the filter uses ``theta_star[k]`` if
    ``t_k > tau`` and it is defined, and ``theta_check`` otherwise.

    Modes
    -----
    ``precomputed``
        ``gamma(theta, t)`` is tabulated on ``n_nodes`` parameter values
        (plus ``theta_check`` and ``extra_nodes``) and interpolated linearly.
    ``recurrent``
        A variance ``gamma_hat`` co-evolves with the changing parameter.
    """
    if mode not in ("precomputed", "recurrent"):
        raise ValueError("mode must be 'precomputed' or 'recurrent'")
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    eps = _eps(spec, eps)
    dx = _time_major_dx(x, grid)
    ts = np.asarray(theta_star, dtype=float)
    if ts.shape[-1] != grid.N + 1:
        raise ShapeError("theta_star must be sampled on the observation grid")
    tc = np.asarray(theta_check, dtype=float)
    shape = np.broadcast_shapes(ts.shape[:-1], tc.shape, dx.shape[1:])
    left = np.moveaxis(np.broadcast_to(ts, shape + (grid.N + 1,))[..., :-1], -1, 0)
    after = (grid.times[:-1] > tau + 1e-12).reshape((grid.N,) + (1,) * len(shape))
    steps = np.where(after & np.isfinite(left), left, np.broadcast_to(tc, shape))
    lo, hi = spec.theta.alpha, spec.theta.beta
    if np.any(steps < lo) or np.any(steps > hi):
        raise DomainError("parameter path leaves [alpha, beta]")
    dx = _broadcast_dx(dx, shape)
    table = None
    if mode == "precomputed":
        nodes = np.unique(np.concatenate([np.linspace(lo, hi, n_nodes), np.ravel(tc),
                                          np.asarray(extra_nodes, dtype=float).ravel()]))
        rs = solve_riccati(spec, nodes, eps, grid, keep_fine=True)
        table = (nodes, rs.gamma_fine)
    out = _engine(spec, eps, grid, steps, dx, table=table)
    return FilterPath(grid, eps, _batch_first(steps), _batch_first(out.m),
                      _batch_first(out.gamma), floor_hits=out.floor_hits)
