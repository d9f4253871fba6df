"""Substitution estimator: invert the map ``theta -> Psi_tau(theta)``.

The estimate ``theta_check`` solves ``Psi_tau(theta) = psi_hat`` where
``psi_hat`` is the kernel quadratic-variation estimate.  The map must be
strictly monotone on ``[alpha, beta]``; :func:`certify` checks this on a
grid before any inversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, PreconditionError, UnsupportedOperationError
from .kernels import KernelConstants
from .model import SystemSpec, dpsi_dtheta, psi_of_theta, var_Z


@dataclass(frozen=True)
class ThetaSpace:
    """Certified monotone parameter interval for one ``tau``.

    ``direction`` is +1 when ``Psi`` increases in ``theta``; ``kappa`` is the
    smallest ``|dPsi/dtheta|`` seen on the certification grid.
    """

    alpha: float
    beta: float
    tau: float
    direction: int
    kappa: float
    psi_alpha: float
    psi_beta: float

    @property
    def psi_min(self) -> float:
        return min(self.psi_alpha, self.psi_beta)

    @property
    def psi_max(self) -> float:
        return max(self.psi_alpha, self.psi_beta)


def certify(spec: SystemSpec, tau: float, n: int = 200, kappa_min: float = 1e-10) -> ThetaSpace:
    """Verify strict monotonicity of ``Psi_tau`` over the parameter interval.

    Raises
    ------
    PreconditionError
        If ``dPsi/dtheta`` changes sign or gets within ``kappa_min`` of zero
        anywhere on an ``n``-point grid.
    """
    if not spec.is_parametric:
        raise UnsupportedOperationError("system has no unknown parameter")
    lo, hi = spec.theta.alpha, spec.theta.beta
    grid = np.linspace(lo, hi, n)
    d = np.array([dpsi_dtheta(spec, float(th), tau) for th in grid])
    if np.all(d > 0):
        direction = 1
    elif np.all(d < 0):
        direction = -1
    else:
        bad = grid[np.argmin(np.abs(d))]
        raise PreconditionError(f"Psi_tau is not monotone on [{lo}, {hi}]; "
                                f"derivative vanishes near theta={bad:.4g}")
    kappa = float(np.min(np.abs(d)))
    if kappa < kappa_min:
        raise PreconditionError(f"|dPsi/dtheta| drops to {kappa:.3g}; inversion ill-conditioned")
    return ThetaSpace(lo, hi, tau, direction, kappa,
                      psi_of_theta(spec, lo, tau), psi_of_theta(spec, hi, tau))


@dataclass(frozen=True)
class SEResult:
    """Substitution estimate and how it was obtained.

    ``clamped`` is ``"alpha"`` or ``"beta"`` when ``psi_hat`` fell outside
    the range of ``Psi_tau`` and the estimate was set to that endpoint.
    """

    theta: float
    psi_hat: float
    clamped: str | None = None

    @property
    def is_clamped(self) -> bool:
        return self.clamped is not None


def substitution_estimator(psi_hat: float, spec: SystemSpec, tau: float,
                           space: ThetaSpace | None = None) -> SEResult:
    """Invert ``Psi_tau`` at ``psi_hat``, clamping to the interval ends.

    Pass a precomputed ``space`` from :func:`certify` when inverting many
    estimates for the same system.
    """
    space = certify(spec, tau) if space is None else space
    psi_hat = float(psi_hat)
    if not math.isfinite(psi_hat):
        raise DomainError("psi_hat is not finite")
    # endpoint where Psi is smallest / largest
    at_min, at_max = ("alpha", "beta") if space.direction > 0 else ("beta", "alpha")
    if psi_hat <= space.psi_min:
        return SEResult(getattr(space, at_min), psi_hat, at_min)
    if psi_hat >= space.psi_max:
        return SEResult(getattr(space, at_max), psi_hat, at_max)
    root = brentq(lambda th: psi_of_theta(spec, th, tau) - psi_hat,
                  space.alpha, space.beta, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                  maxiter=200)
    return SEResult(float(root), psi_hat)


def substitution_estimates(psi_hats, spec: SystemSpec, tau: float):
    """Vectorised :func:`substitution_estimator`.

    Returns
    -------
    theta : ndarray
    clamped : ndarray of object
        ``None``, ``"alpha"`` or ``"beta"`` per entry.
    """
    space = certify(spec, tau)
    res = [substitution_estimator(p, spec, tau, space) for p in np.ravel(psi_hats)]
    return (np.array([r.theta for r in res]),
            np.array([r.clamped for r in res], dtype=object))


def se_limit_stddev(spec: SystemSpec, theta0: float, tau: float,
                    constants: KernelConstants) -> float:
    """Predicted standard deviation of ``(theta_check - theta0) / sqrt(eps)``.

    The delta method applied to the limit law of the quadratic-variation
    error: ``sqrt(Var Z_tau) / |dPsi/dtheta(theta0)|``.
    """
    d = dpsi_dtheta(spec, theta0, tau)
    if d == 0:
        raise PreconditionError("dPsi/dtheta vanishes at theta0")
    return math.sqrt(var_Z(spec, tau, constants, theta0)) / abs(d)
