"""Coefficient functions of the linear system.

Two kinds of field are provided:

* :class:`ScalarField` -- a known function of time ``t`` only.
* :class:`ParamField` -- a function of ``(theta, t)`` with analytic first and
  second derivatives in ``theta``.

Both expose the same evaluation interface (``value``, ``dtheta``,
``d2theta``) so callers never need to branch on the field kind.  Arguments
broadcast with the usual NumPy rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError

_FAMILIES = ("constant", "linear", "polynomial", "sinusoid", "tabulated")
_SMOOTHNESS = {"C0": 0, "C1": 1, "C2": 2}


@dataclass(frozen=True)
class ScalarField:
    """A deterministic function of time.

    Use the constructors (:meth:`constant`, :meth:`linear`, ...) rather than
    building instances by hand.  ``params`` holds the family parameters as a
    tuple; for ``tabulated`` it is ``(knots, values)``.
    """

    family: str
    params: tuple
    smoothness: str = "C2"

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ConfigurationError(f"unknown field family {self.family!r}")
        if self.smoothness not in _SMOOTHNESS:
            raise ConfigurationError(f"smoothness must be one of {sorted(_SMOOTHNESS)}")
        if self.family == "tabulated":
            knots, values = self.params
            if len(knots) != len(values) or len(knots) < 2:
                raise ConfigurationError("tabulated field needs >= 2 matching knots/values")
            if np.any(np.diff(knots) <= 0):
                raise ConfigurationError("tabulated knots must be strictly increasing")

    # -- constructors -------------------------------------------------------
    @classmethod
    def constant(cls, value: float) -> ScalarField:
        return cls("constant", (float(value),))

    @classmethod
    def linear(cls, c0: float, c1: float) -> ScalarField:
        return cls("linear", (float(c0), float(c1)))

    @classmethod
    def polynomial(cls, coeffs) -> ScalarField:
        """Polynomial in ``t`` with ascending coefficients ``c0 + c1 t + ...``."""
        return cls("polynomial", tuple(float(c) for c in coeffs))

    @classmethod
    def sinusoid(cls, offset: float, amplitude: float, frequency: float,
                 phase: float = 0.0) -> ScalarField:
        """``offset + amplitude * sin(frequency * t + phase)``."""
        return cls("sinusoid", (float(offset), float(amplitude), float(frequency), float(phase)))

    @classmethod
    def tabulated(cls, knots, values) -> ScalarField:
        """Cubic-spline interpolant through ``(knots, values)``."""
        return cls("tabulated", (tuple(float(k) for k in knots), tuple(float(v) for v in values)))

    # -- evaluation ---------------------------------------------------------
    @cached_property
    def _spline(self) -> CubicSpline:
        knots, values = self.params
        return CubicSpline(np.asarray(knots), np.asarray(values))

    @property
    def is_parametric(self) -> bool:
        return False

    @property
    def knots(self) -> tuple:
        """Interior breakpoints, useful as hints for adaptive quadrature."""
        return self.params[0] if self.family == "tabulated" else ()

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.family == "constant":
            return np.full_like(t, p[0])
        if self.family == "linear":
            return p[0] + p[1] * t
        if self.family == "polynomial":
            return np.polynomial.polynomial.polyval(t, p) + 0.0 * t
        if self.family == "sinusoid":
            return p[0] + p[1] * np.sin(p[2] * t + p[3])
        return self._spline(t)

    def derivative(self, t):
        """Time derivative ``d/dt``."""
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.family == "constant":
            return np.zeros_like(t)
        if self.family == "linear":
            return np.full_like(t, p[1])
        if self.family == "polynomial":
            dp = np.polynomial.polynomial.polyder(p) if len(p) > 1 else [0.0]
            return np.polynomial.polynomial.polyval(t, dp) + 0.0 * t
        if self.family == "sinusoid":
            return p[1] * p[2] * np.cos(p[2] * t + p[3])
        return self._spline(t, 1)

    def value(self, t, theta=None):
        return self(t) if theta is None else self(t) + 0.0 * np.asarray(theta, dtype=float)

    def dtheta(self, t, theta=None):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(theta)))

    def d2theta(self, t, theta=None):
        return self.dtheta(t, theta)

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        p = self.params
        if self.family == "constant":
            d = {"family": "constant", "value": p[0]}
        elif self.family == "linear":
            d = {"family": "linear", "c0": p[0], "c1": p[1]}
        elif self.family == "polynomial":
            d = {"family": "polynomial", "coeffs": list(p)}
        elif self.family == "sinusoid":
            d = {"family": "sinusoid", "offset": p[0], "amplitude": p[1],
                 "frequency": p[2], "phase": p[3]}
        else:
            d = {"family": "tabulated", "knots": list(p[0]), "values": list(p[1])}
        if self.smoothness != "C2":
            d["smoothness"] = self.smoothness
        return d


@dataclass(frozen=True)
class ParamField:
    """A coefficient depending on the unknown parameter ``theta``.

    Families
    --------
    ``scale``
        ``theta * base(t)``.
    ``shift_root``
        ``sqrt(h(t) + theta * g(t))``; needs ``h > 0``, ``g > 0`` and
        ``theta > 0``.
    ``poly_theta``
        ``sum_j theta**j * c_j(t)``.
    """

    family: str
    parts: tuple[ScalarField, ...]
    smoothness: str = field(default="C2")

    def __post_init__(self) -> None:
        expected = {"scale": 1, "shift_root": 2}
        if self.family not in ("scale", "shift_root", "poly_theta"):
            raise ConfigurationError(f"unknown parametric family {self.family!r}")
        n = expected.get(self.family)
        if n is not None and len(self.parts) != n:
            raise ConfigurationError(f"{self.family} needs {n} base field(s)")
        if self.family == "poly_theta" and not self.parts:
            raise ConfigurationError("poly_theta needs at least one coefficient field")

    @classmethod
    def scale(cls, base: ScalarField) -> ParamField:
        return cls("scale", (base,))

    @classmethod
    def shift_root(cls, h: ScalarField, g: ScalarField) -> ParamField:
        return cls("shift_root", (h, g))

    @classmethod
    def poly_theta(cls, coeffs) -> ParamField:
        return cls("poly_theta", tuple(coeffs))

    @property
    def is_parametric(self) -> bool:
        return True

    @property
    def knots(self) -> tuple:
        return tuple(sorted({k for p in self.parts for k in p.knots}))

    def _require(self, theta):
        if theta is None:
            raise ConfigurationError("parametric field evaluated without theta")
        return np.asarray(theta, dtype=float)

    def value(self, t, theta=None):
        th = self._require(theta)
        if self.family == "scale":
            return th * self.parts[0](t)
        if self.family == "shift_root":
            h, g = self.parts
            return np.sqrt(h(t) + th * g(t))
        out = 0.0
        for c in reversed(self.parts):
            out = out * th + c(t)
        return out

    def dtheta(self, t, theta=None):
        th = self._require(theta)
        if self.family == "scale":
            return self.parts[0](t) + 0.0 * th
        if self.family == "shift_root":
            h, g = self.parts
            return g(t) / (2.0 * np.sqrt(h(t) + th * g(t)))
        out = 0.0 * th
        for j in range(len(self.parts) - 1, 0, -1):
            out = out * th + j * self.parts[j](t)
        return out

    def d2theta(self, t, theta=None):
        th = self._require(theta)
        if self.family == "scale":
            return 0.0 * (self.parts[0](t) + th)
        if self.family == "shift_root":
            h, g = self.parts
            return -g(t) ** 2 / (4.0 * (h(t) + th * g(t)) ** 1.5)
        out = 0.0 * th
        for j in range(len(self.parts) - 1, 1, -1):
            out = out * th + j * (j - 1) * self.parts[j](t)
        return out

    def __call__(self, t, theta=None):
        return self.value(t, theta)

    def to_dict(self) -> dict[str, Any]:
        if self.family == "scale":
            return {"family": "scale", "base": self.parts[0].to_dict()}
        if self.family == "shift_root":
            return {"family": "shift_root", "h": self.parts[0].to_dict(),
                    "g": self.parts[1].to_dict()}
        return {"family": "poly_theta", "coeffs": [p.to_dict() for p in self.parts]}


Field = ScalarField | ParamField


def field_from_dict(d: dict[str, Any] | float | int) -> Field:
    """Inverse of ``to_dict``; a bare number is read as a constant field."""
    if isinstance(d, (int, float)):
        return ScalarField.constant(d)
    fam = d.get("family")
    smooth = d.get("smoothness", "C2")
    if fam == "constant":
        return ScalarField("constant", (float(d["value"]),), smooth)
    if fam == "linear":
        return ScalarField("linear", (float(d["c0"]), float(d["c1"])), smooth)
    if fam == "polynomial":
        return ScalarField("polynomial", tuple(float(c) for c in d["coeffs"]), smooth)
    if fam == "sinusoid":
        return ScalarField("sinusoid", (float(d["offset"]), float(d["amplitude"]),
                                        float(d["frequency"]), float(d.get("phase", 0.0))), smooth)
    if fam == "tabulated":
        f = ScalarField.tabulated(d["knots"], d["values"])
        return ScalarField(f.family, f.params, smooth)
    if fam == "scale":
        return ParamField.scale(field_from_dict(d["base"]))
    if fam == "shift_root":
        return ParamField.shift_root(field_from_dict(d["h"]), field_from_dict(d["g"]))
    if fam == "poly_theta":
        return ParamField.poly_theta([field_from_dict(c) for c in d["coeffs"]])
    raise ConfigurationError(f"unknown field family {fam!r}")


def as_field(x) -> Field:
    if isinstance(x, (ScalarField, ParamField)):
        return x
    if isinstance(x, dict):
        return field_from_dict(x)
    return ScalarField.constant(float(x))
