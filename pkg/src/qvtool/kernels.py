"""One-sided polynomial smoothing kernels and their variance constants.

A *right* kernel lives on ``[0, 1]`` and a *left* kernel on ``[-1, 0]``.
Both must integrate to one and have a vanishing first moment, which forces
them to change sign.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import InvalidKernelError, KernelConstructionError

_SUPPORT = {"right": (0.0, 1.0), "left": (-1.0, 0.0)}


@dataclass(frozen=True)
class Kernel:
    """Polynomial ``sum_j coeffs[j] u**j`` restricted to its one-sided support."""

    side: str
    coeffs: tuple[float, ...]
    vanish_endpoints: bool = False

    def __post_init__(self) -> None:
        if self.side not in _SUPPORT:
            raise ValueError("side must be 'left' or 'right'")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @property
    def support(self) -> tuple[float, float]:
        return _SUPPORT[self.side]

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def _inside(self, u):
        lo, hi = self.support
        return (u >= lo) & (u <= hi)

    def poly(self, u):
        """The polynomial itself, ignoring the support."""
        return P.polyval(np.asarray(u, dtype=float), self.coeffs)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(self._inside(u), self.poly(u), 0.0)

    def derivative(self, u):
        """Exact polynomial derivative ``K'(u)`` on the support, zero outside."""
        u = np.asarray(u, dtype=float)
        d = P.polyder(self.coeffs) if self.degree > 0 else [0.0]
        return np.where(self._inside(u), P.polyval(u, d), 0.0)

    def cumulative(self, u):
        """``A(u) = int_lo^min(u, hi) K``; zero left of the support."""
        lo, hi = self.support
        anti = P.polyint(self.coeffs)
        uc = np.clip(np.asarray(u, dtype=float), lo, hi)
        return P.polyval(uc, anti) - P.polyval(lo, anti)

    def clipped_poly(self, u):
        """``K`` evaluated at ``u`` clamped to the support.

        Differences of this function integrate ``K'`` over an interval
        without the endpoint jumps of a non-vanishing kernel.
        """
        lo, hi = self.support
        return self.poly(np.clip(np.asarray(u, dtype=float), lo, hi))

    def mirrored(self) -> Kernel:
        """``u -> K(-u)`` on the opposite side."""
        c = tuple(c * (-1) ** j for j, c in enumerate(self.coeffs))
        return Kernel("left" if self.side == "right" else "right", c, self.vanish_endpoints)

    def to_dict(self) -> dict[str, Any]:
        return {"side": self.side, "coeffs": list(self.coeffs),
                "vanish_endpoints": self.vanish_endpoints}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Kernel:
        return cls(d["side"], tuple(d["coeffs"]), bool(d.get("vanish_endpoints", False)))


def _moment_row(lo: float, hi: float, k: int, ncoef: int) -> np.ndarray:
    # int_lo^hi u^k * u^j du for each coefficient j
    j = np.arange(ncoef)
    p = j + k + 1
    return (hi ** p - lo ** p) / p


def solve_moment_kernel(side: str, degree: int, vanish_endpoints: bool = False) -> Kernel:
    """Polynomial kernel of the given degree meeting the moment conditions.

    Constraints are ``int K = 1`` and ``int u K = 0`` plus, when
    ``vanish_endpoints``, ``K = 0`` at both ends of the support.  The system
    must be square: degree 1 without vanishing ends, degree 3 with them.
    """
    if side not in _SUPPORT:
        raise KernelConstructionError("side must be 'left' or 'right'")
    if degree < 1:
        raise KernelConstructionError("degree must be >= 1 (constraint 'first moment = 0' "
                                      "cannot hold for a constant kernel)")
    lo, hi = _SUPPORT[side]
    n = degree + 1
    rows = [_moment_row(lo, hi, 0, n), _moment_row(lo, hi, 1, n)]
    rhs = [1.0, 0.0]
    names = ["zeroth moment = 1", "first moment = 0"]
    if vanish_endpoints:
        rows += [lo ** np.arange(n), hi ** np.arange(n)]
        rhs += [0.0, 0.0]
        names += [f"K({lo:g}) = 0", f"K({hi:g}) = 0"]
    A = np.array(rows)
    rhs = np.array(rhs)
    if len(rows) < n:
        raise KernelConstructionError(
            f"under-determined: degree {degree} has {n} coefficients but only "
            f"{len(rows)} constraints ({', '.join(names)})")
    if len(rows) > n:
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        resid = np.abs(A @ sol - rhs)
        worst = names[int(np.argmax(resid))]
        raise KernelConstructionError(
            f"inconsistent: degree {degree} cannot satisfy all {len(rows)} constraints; "
            f"'{worst}' fails by {resid.max():.3g}")
    if np.linalg.matrix_rank(A) < n:
        raise KernelConstructionError("singular constraint system")
    coeffs = np.linalg.solve(A, rhs)
    return Kernel(side, tuple(coeffs), vanish_endpoints)


@dataclass(frozen=True)
class ValidationReport:
    zeroth_residual: float
    first_residual: float
    support_ok: bool
    tolerance: float

    @property
    def zeroth_ok(self) -> bool:
        return self.zeroth_residual < self.tolerance

    @property
    def first_ok(self) -> bool:
        return self.first_residual < self.tolerance

    @property
    def passed(self) -> bool:
        return self.zeroth_ok and self.first_ok and self.support_ok


def _gauss(lo: float, hi: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


def validate(kernel: Kernel, tolerance: float = 1e-10) -> ValidationReport:
    """Check ``int K = 1``, ``int u K = 0`` and zero value off the support."""
    lo, hi = kernel.support
    u, w = _gauss(lo, hi, 1000)
    k = kernel(u)
    r0 = abs(float(np.sum(w * k)) - 1.0)
    r1 = abs(float(np.sum(w * u * k)))
    outside = np.concatenate([np.linspace(lo - 2.0, lo, 50, endpoint=False),
                              np.linspace(hi, hi + 2.0, 51)[1:]])
    support_ok = bool(np.all(kernel(outside) == 0.0))
    return ValidationReport(r0, r1, support_ok, tolerance)


def require_valid(kernel: Kernel, tolerance: float = 1e-10) -> None:
    rep = validate(kernel, tolerance)
    if not rep.passed:
        raise InvalidKernelError(
            f"{kernel.side} kernel rejected: |int K - 1| = {rep.zeroth_residual:.3g}, "
            f"|int u K| = {rep.first_residual:.3g}, support ok = {rep.support_ok}")


@dataclass(frozen=True)
class KernelConstants:
    """Variance constants of a kernel pair (all dimensionless).

    ``dstar2`` = int K*^2, ``d2`` = int K^2, ``dstarstar2`` = double integral
    of K*(u) K*(v) min(u, v), ``dd2`` = the same double integral for K.
    """

    dstar2: float
    d2: float
    dstarstar2: float
    dd2: float


def _min_double_integral(kernel: Kernel, n: int) -> float:
    # Split the square along u = v; on the triangle u < v the integrand is
    # K(u) K(v) u, smooth, and the other triangle contributes the same.
    lo, hi = kernel.support
    v, wv = _gauss(lo, hi, n)
    s, ws = _gauss(0.0, 1.0, n)
    u = lo + (v[:, None] - lo) * s[None, :]
    jac = (v - lo)[:, None]
    inner = np.sum(ws[None, :] * jac * u * kernel(u), axis=1)
    return 2.0 * float(np.sum(wv * kernel(v) * inner))


def constants(k_star: Kernel, k: Kernel, n: int = 400) -> KernelConstants:
    """Quadrature of the kernel constants on an ``n x n`` triangle-split grid."""
    lo, hi = k_star.support
    u, w = _gauss(lo, hi, n)
    ds = float(np.sum(w * k_star(u) ** 2))
    lo, hi = k.support
    u, w = _gauss(lo, hi, n)
    d = float(np.sum(w * k(u) ** 2))
    return KernelConstants(ds, d, _min_double_integral(k_star, n), _min_double_integral(k, n))


def default_pair(degree: int = 1, vanish_endpoints: bool = False) -> tuple[Kernel, Kernel]:
    """``(K*, K)``: left kernel for the endpoint, right kernel for the path."""
    return (solve_moment_kernel("left", degree, vanish_endpoints),
            solve_moment_kernel("right", degree, vanish_endpoints))


def parse_kernel_option(text: str) -> tuple[Kernel, Kernel]:
    """Parse ``"degree=3,vanish=true"`` into a kernel pair."""
    opts = {"degree": "1", "vanish": "false"}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, val = part.partition("=")
        if key.strip() not in opts:
            raise ValueError(f"unknown kernel option {key!r}")
        opts[key.strip()] = val.strip()
    vanish = opts["vanish"].lower() in ("1", "true", "yes")
    return default_pair(int(opts["degree"]), vanish)
