"""System description and deterministic functionals of the model.

The partially observed system is::

    dY = -a(t) Y dt + b(t) dV,              Y_0 = 0
    dX =  f(t) Y dt + eps * sigma(t) dW,    X_0 = 0

Any of ``a``, ``b``, ``f`` may depend on an unknown scalar ``theta``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, DomainError, UnsupportedOperationError
from .fields import Field, ScalarField, as_field, field_from_dict

QUAD_TOL = 1e-10


@dataclass(frozen=True)
class ThetaBounds:
    alpha: float
    beta: float
    true: float | None = None

    def __post_init__(self) -> None:
        if not self.alpha < self.beta:
            raise ConfigurationError("theta interval needs alpha < beta")
        if self.true is not None and not self.alpha < self.true < self.beta:
            raise ConfigurationError("true theta must lie strictly inside (alpha, beta)")

    def contains(self, theta: float) -> bool:
        return self.alpha <= theta <= self.beta


@dataclass(frozen=True)
class SystemSpec:
    """Coefficients, horizon, noise scale and parameter interval.

    ``eps = 0`` is accepted and means a noiseless observation channel; it is
    only meaningful for simulation (filters need ``eps > 0``).
    """

    a: Field
    b: Field
    f: Field
    sigma: Field
    T: float = 1.0
    eps: float = 0.1
    theta: ThetaBounds | None = None

    def __post_init__(self) -> None:
        for name in ("a", "b", "f", "sigma"):
            object.__setattr__(self, name, as_field(getattr(self, name)))
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigurationError("eps must lie in [0, 1]")
        if self.sigma.is_parametric:
            raise ConfigurationError("sigma may not depend on theta")
        grid = np.linspace(0.0, self.T, 257)
        if np.any(self.sigma(grid) <= 0):
            raise ConfigurationError("sigma(t) must be positive on [0, T]")
        if self.is_parametric and self.theta is None:
            raise ConfigurationError("parametric coefficients require theta bounds (alpha, beta)")
        for fld in (self.a, self.b, self.f):
            if getattr(fld, "family", None) == "shift_root":
                h, g = fld.parts
                if np.any(h(grid) <= 0) or np.any(g(grid) <= 0) or self.theta.alpha < 0:
                    raise ConfigurationError("shift_root needs h > 0, g > 0 and theta > 0")

    @property
    def is_parametric(self) -> bool:
        return any(fld.is_parametric for fld in (self.a, self.b, self.f))

    def resolve_theta(self, theta: float | None = None):
        """Parameter value to plug in: explicit ``theta`` or the true one."""
        if not self.is_parametric:
            return None
        if theta is not None:
            return theta
        if self.theta is None or self.theta.true is None:
            raise ConfigurationError("parametric system needs a true theta for this operation")
        return self.theta.true

    def with_eps(self, eps: float) -> SystemSpec:
        return dataclasses.replace(self, eps=float(eps))

    def with_true_theta(self, theta: float) -> SystemSpec:
        return dataclasses.replace(self, theta=dataclasses.replace(self.theta, true=float(theta)))

    def knots(self) -> list[float]:
        ks = set()
        for fld in (self.a, self.b, self.f, self.sigma):
            ks.update(fld.knots)
        return sorted(ks)

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "a": self.a.to_dict(), "b": self.b.to_dict(), "f": self.f.to_dict(),
            "sigma": self.sigma.to_dict(), "T": self.T, "eps": self.eps,
        }
        if self.theta is not None:
            d["theta"] = {"alpha": self.theta.alpha, "beta": self.theta.beta,
                          "true": self.theta.true}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SystemSpec:
        try:
            th = d.get("theta")
            bounds = None
            if th is not None:
                bounds = ThetaBounds(float(th["alpha"]), float(th["beta"]),
                                     None if th.get("true") is None else float(th["true"]))
            return cls(a=field_from_dict(d["a"]), b=field_from_dict(d["b"]),
                       f=field_from_dict(d["f"]), sigma=field_from_dict(d["sigma"]),
                       T=float(d.get("T", 1.0)), eps=float(d.get("eps", 0.1)), theta=bounds)
        except KeyError as exc:
            raise ConfigurationError(f"system description lacks field {exc}") from None

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> SystemSpec:
        """Parse a JSON document (not a path; see :meth:`load`)."""
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> SystemSpec:
        return cls.from_json(Path(path).read_text())


def constant_system(a=1.0, b=1.0, f=1.0, sigma=1.0, T=1.0, eps=0.1) -> SystemSpec:
    """Shorthand for a system with constant coefficients."""
    return SystemSpec(ScalarField.constant(a), ScalarField.constant(b),
                      ScalarField.constant(f), ScalarField.constant(sigma), T=T, eps=eps)


def integrate_time(fn, lo: float, hi: float, spec: SystemSpec | None = None) -> float:
    """Adaptive quadrature of ``fn`` over ``[lo, hi]`` to ``QUAD_TOL``."""
    if hi <= lo:
        return 0.0
    pts = None
    if spec is not None:
        pts = [k for k in spec.knots() if lo < k < hi] or None
    val, _ = integrate.quad(lambda s: float(fn(s)), lo, hi, epsabs=QUAD_TOL,
                            epsrel=QUAD_TOL, limit=500, points=pts)
    return val


def _check_tau(spec: SystemSpec, tau: float, allow_zero: bool = False) -> None:
    lo_ok = tau >= 0 if allow_zero else tau > 0
    if not (lo_ok and tau <= spec.T * (1 + 1e-12)):
        raise DomainError(f"tau={tau} outside (0, T={spec.T}]")


def psi_true(spec: SystemSpec, tau: float) -> float:
    """Quadratic variation ``int_0^tau f^2 b^2 ds`` at the true parameter."""
    _check_tau(spec, tau)
    th = spec.resolve_theta()
    return integrate_time(lambda s: (spec.f.value(s, th) * spec.b.value(s, th)) ** 2,
                          0.0, tau, spec)


def _require_param(spec: SystemSpec, theta: float) -> None:
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    if not spec.theta.contains(theta):
        raise DomainError(f"theta={theta} outside [{spec.theta.alpha}, {spec.theta.beta}]")


def psi_of_theta(spec: SystemSpec, theta: float, tau: float) -> float:
    """``Psi_tau(theta) = int_0^tau f(theta,t)^2 b(theta,t)^2 dt``."""
    _require_param(spec, theta)
    _check_tau(spec, tau)
    return integrate_time(lambda s: (spec.f.value(s, theta) * spec.b.value(s, theta)) ** 2,
                          0.0, tau, spec)


def dpsi_dtheta(spec: SystemSpec, theta: float, tau: float) -> float:
    """Derivative of :func:`psi_of_theta` in ``theta``, differentiated under the integral."""
    _require_param(spec, theta)
    _check_tau(spec, tau)

    def integrand(s):
        f = spec.f.value(s, theta)
        b = spec.b.value(s, theta)
        return 2.0 * f * b * (spec.f.dtheta(s, theta) * b + f * spec.b.dtheta(s, theta))

    return integrate_time(integrand, 0.0, tau, spec)


def rk4_linear_scalar(rate, source, tau: float, n: int) -> float:
    """Solve ``v' = -rate(t) v + source(t)``, ``v(0) = 0`` with classical RK4."""
    h = tau / n
    t = np.linspace(0.0, tau, 2 * n + 1)
    r = rate(t)
    s = source(t)
    v = 0.0
    for i in range(n):
        j = 2 * i
        k1 = -r[j] * v + s[j]
        k2 = -r[j + 1] * (v + 0.5 * h * k1) + s[j + 1]
        k3 = -r[j + 1] * (v + 0.5 * h * k2) + s[j + 1]
        k4 = -r[j + 2] * (v + h * k3) + s[j + 2]
        v += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return v


def var_Y(spec: SystemSpec, tau: float, theta: float | None = None) -> float:
    """Variance of the hidden state, from ``v' = -2 a v + b^2``, ``v(0) = 0``."""
    _check_tau(spec, tau, allow_zero=True)
    if tau == 0:
        return 0.0
    th = spec.resolve_theta(theta)
    n = int(min(max(400, np.ceil(tau * 4000)), 40000))
    v = rk4_linear_scalar(lambda t: 2.0 * spec.a.value(t, th),
                          lambda t: spec.b.value(t, th) ** 2, tau, n)
    return max(v, 0.0)


def var_Z(spec: SystemSpec, tau: float, constants, theta: float | None = None) -> float:
    """Predicted variance of the limit error ``Z_tau`` of the QV estimator.

    ``4 f^2 VarY (f^2 b^2 d**^2 + sigma^2 d*^2) + 4 d**^2 int f^4 b^4
    + 4 d**^2 int f^2 b^2 sigma^2``, all evaluated at ``tau``.  ``Y_tau`` is
    treated as independent of the local kernel noises.
    """
    _check_tau(spec, tau)
    th = spec.resolve_theta(theta)
    f = float(spec.f.value(tau, th))
    b = float(spec.b.value(tau, th))
    sg = float(spec.sigma(tau))
    vy = var_Y(spec, tau, th)
    dss, ds = constants.dstarstar2, constants.dstar2
    q_int = integrate_time(lambda s: (spec.f.value(s, th) * spec.b.value(s, th)) ** 4,
                           0.0, tau, spec)
    r_int = integrate_time(lambda s: (spec.f.value(s, th) * spec.b.value(s, th)
                                      * spec.sigma(s)) ** 2, 0.0, tau, spec)
    local = 4.0 * f * f * vy * (f * f * b * b * dss + sg * sg * ds)
    return local + 4.0 * dss * q_int + 4.0 * dss * r_int
