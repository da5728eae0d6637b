"""Magnetic and electric potentials as Cartesian callables.

Every vector potential maps points of shape ``S + (d,)`` to values of the same
shape; scalar potentials return shape ``S``.  Gradients of smooth bumps give
gauge shifts, rotational fields give nonzero curl.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Bump:
    """Smooth compactly supported bump ``exp(1 - 1/(1 - |x-c|^2/R^2))``."""

    center: tuple
    radius: float
    amplitude: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        s = np.sum((x - np.asarray(self.center)) ** 2, axis=-1) / self.radius ** 2
        out = np.zeros(s.shape)
        inside = s < 1.0
        out[inside] = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
        return out

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - np.asarray(self.center)
        s = np.sum(diff ** 2, axis=-1) / self.radius ** 2
        out = np.zeros(x.shape)
        inside = s < 1.0
        value = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
        factor = -value / (1.0 - s[inside]) ** 2 * 2.0 / self.radius ** 2
        out[inside] = factor[:, None] * diff[inside]
        return out


@dataclass(frozen=True)
class ZeroVector:
    def __call__(self, x):
        return np.zeros(np.shape(x))


@dataclass(frozen=True)
class GradientField:
    """``W = grad Psi`` for a bump Psi; the field is curl free."""

    psi: Bump

    def __call__(self, x):
        return self.psi.gradient(x)

    def line_integral(self, start, stop):
        return self.psi(stop) - self.psi(start)


@dataclass(frozen=True)
class GaugeShifted:
    """``base + grad psi``; line integrals of the gradient part are exact."""

    base: object
    psi: object

    def __call__(self, x):
        return self.base(x) + self.psi.gradient(x)

    def line_integral(self, start, stop):
        from .fvm import chord_integral
        return chord_integral(self.base, start, stop) + self.psi(stop) - self.psi(start)


@dataclass(frozen=True)
class SwirlField:
    """Rotation about the axis ``e_axis`` through ``center``, damped by a Gaussian.

    ``W = a * exp(-|x-c|^2 / w^2) * e_axis x (x - c)`` has nonzero curl near
    the center.
    """

    center: tuple
    amplitude: float = 1.0
    width: float = 0.5
    axis: int = 2

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - np.asarray(self.center)
        damp = self.amplitude * np.exp(-np.sum(diff ** 2, axis=-1) / self.width ** 2)
        out = np.zeros(x.shape)
        a, b = [k for k in range(x.shape[-1]) if k != self.axis][:2]
        out[..., a] = -damp * diff[..., b]
        out[..., b] = damp * diff[..., a]
        return out


@dataclass(frozen=True)
class SumField:
    parts: tuple

    def __call__(self, x):
        return sum(p(x) for p in self.parts)


@dataclass(frozen=True)
class ConstantScalar:
    value: float = 0.0

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.value, dtype=float)


@dataclass(frozen=True)
class SumScalar:
    parts: tuple

    def __call__(self, x):
        return sum(p(x) for p in self.parts)


def divergence(field, x, step: float = 1e-5):
    """Central-difference Cartesian divergence of a vector callable."""
    x = np.asarray(x, dtype=float)
    total = np.zeros(x.shape[:-1])
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = step
        total += (field(x + e)[..., k] - field(x - e)[..., k]) / (2 * step)
    return total


def curl_matrix(field, x, step: float = 1e-5):
    """Antisymmetric part ``(dW)_jk = d_j W_k - d_k W_j`` by central differences."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    jac = np.zeros(x.shape + (d,))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[..., j, :] = (field(x + e) - field(x - e)) / (2 * step)
    return jac - np.swapaxes(jac, -1, -2)


def parse_vector_potential(spec: str, dim: int = 3):
    """``zero``, ``gradient:cx,cy,cz,R,A`` or ``solenoidal:cx,cy,cz,A,w``."""
    kind, _, arg = spec.strip().partition(":")
    values = [float(v) for v in arg.split(",")] if arg else []
    if kind == "zero":
        return ZeroVector()
    if kind == "gradient":
        return GradientField(Bump(tuple(values[:dim]), values[dim], values[dim + 1] if len(values) > dim + 1 else 1.0))
    if kind == "solenoidal":
        amp = values[dim] if len(values) > dim else 1.0
        width = values[dim + 1] if len(values) > dim + 1 else 0.5
        return SwirlField(tuple(values[:dim]), amp, width)
    raise ValueError(f"unknown vector potential {spec!r}")


def parse_scalar_potential(spec: str, dim: int = 3):
    """``const:v`` or ``bump:cx,cy,cz,R,A``."""
    kind, _, arg = spec.strip().partition(":")
    if kind == "const":
        return ConstantScalar(float(arg or 0.0))
    if kind == "bump":
        values = [float(v) for v in arg.split(",")]
        return Bump(tuple(values[:dim]), values[dim], values[dim + 1] if len(values) > dim + 1 else 1.0)
    raise ValueError(f"unknown scalar potential {spec!r}")
