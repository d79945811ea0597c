"""Biot-Savart kernel family, its bounded antiderivative, and circulation laws.

The exact kernel is ``K(x) = (1/2pi) (-x2, x1) / |x|^2`` with the convention
``K(0) = 0``.  The mollified (blob) variant multiplies by
``|x|^2 / (|x|^2 + delta^2)`` which keeps oddness, orthogonality to ``x`` and
the value at the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INV_2PI = 1.0 / (2.0 * math.pi)
V_SUP = 0.25  # sup-norm of the antiderivative V


class InvalidParameter(ValueError):
    """A model parameter is outside its admissible range."""


@dataclass(frozen=True)
class KernelSpec:
    """Mollification length of the Biot-Savart kernel (0 = exact kernel)."""

    delta: float = 0.0

    def __post_init__(self):
        if not (self.delta >= 0.0 and math.isfinite(self.delta)):
            raise InvalidParameter(f"kernel delta must be finite and >= 0, got {self.delta}")


def biot_savart(x, spec: KernelSpec | None = None):
    """Evaluate the (mollified) Biot-Savart kernel.

    ``x`` may be a single point ``(x1, x2)`` or an array of shape ``(..., 2)``.
    Returns an array of the same shape.
    """
    delta = 0.0 if spec is None else spec.delta
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    x2 = x[..., 1]
    r2 = x1 * x1 + x2 * x2 + delta * delta
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(r2 > 0.0, INV_2PI / np.where(r2 > 0.0, r2, 1.0), 0.0)
    out = np.empty_like(x)
    out[..., 0] = -x2 * f
    out[..., 1] = x1 * f
    return out


def v_matrix(x):
    """Scalar factor ``v`` of the bounded antiderivative ``V = v Id``.

    ``v(x) = -(1/2pi) arctan(x1/x2)``; ``K`` is the divergence of ``v Id``,
    i.e. the gradient of ``v``.  On the axis ``x2 = 0`` the limit from
    ``x2 -> 0+`` is returned, ``-sign(x1)/4`` (and 0 at the origin).
    """
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    x2 = x[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        v = -INV_2PI * np.arctan(x1 / x2)
    axis = x2 == 0.0
    if np.any(axis):
        v = np.where(axis, -0.25 * np.sign(x1), v)
    return v[()] if np.ndim(v) == 0 else v


def divergence_of_v(x, h: float = 1e-5):
    """Central-difference divergence of ``v Id`` at ``x`` (shape ``(..., 2)``)."""
    x = np.asarray(x, dtype=float)
    e1 = np.array([h, 0.0])
    e2 = np.array([0.0, h])
    d1 = (v_matrix(x + e1) - v_matrix(x - e1)) / (2 * h)
    d2 = (v_matrix(x + e2) - v_matrix(x - e2)) / (2 * h)
    return np.stack([d1, d2], axis=-1)


@dataclass(frozen=True)
class CirculationLaw:
    """Law of the circulation variable, supported in ``[-A, A]``.

    kind ``constant`` puts all mass on ``value``; ``uniform`` is U(-A, A);
    ``two_point`` puts mass ``p`` on ``+A`` and ``1 - p`` on ``-A``.
    """

    kind: str
    A: float = 1.0
    p: float = 0.5
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "two_point"):
            raise InvalidParameter(f"unknown circulation law {self.kind!r}")
        if self.kind == "constant":
            # support bound is |value| unless a larger A was given explicitly
            if abs(self.value) > self.A:
                object.__setattr__(self, "A", abs(self.value))
        if not (self.A > 0 and math.isfinite(self.A)):
            raise InvalidParameter(f"circulation bound A must be positive, got {self.A}")
        if self.kind == "two_point" and not 0.0 <= self.p <= 1.0:
            raise InvalidParameter(f"two_point probability must lie in [0, 1], got {self.p}")

    @classmethod
    def constant(cls, c: float = 1.0) -> "CirculationLaw":
        return cls("constant", A=max(abs(c), 1e-300), value=c)

    @classmethod
    def uniform(cls, A: float = 1.0) -> "CirculationLaw":
        return cls("uniform", A=A)

    @classmethod
    def two_point(cls, A: float = 1.0, p: float = 0.5) -> "CirculationLaw":
        return cls("two_point", A=A, p=p)

    @property
    def is_discrete(self) -> bool:
        return self.kind != "uniform"

    def atoms(self):
        """Support points and probabilities of a discrete law."""
        if self.kind == "constant":
            return np.array([self.value]), np.array([1.0])
        if self.kind == "two_point":
            return np.array([-self.A, self.A]), np.array([1.0 - self.p, self.p])
        raise InvalidParameter("uniform law has no atoms")

    def mean(self) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return 0.0
        return self.A * (2 * self.p - 1)

    def variance(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "uniform":
            return self.A**2 / 3.0
        return 4 * self.A**2 * self.p * (1 - self.p)

    def scaled(self, factor: float) -> "CirculationLaw":
        """Law of ``M * factor`` (factor > 0)."""
        if self.kind == "constant":
            return CirculationLaw("constant", A=self.A * factor, value=self.value * factor)
        return CirculationLaw(self.kind, A=self.A * factor, p=self.p)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "uniform":
            return {"kind": "uniform", "A": self.A}
        return {"kind": "two_point", "A": self.A, "p": self.p}

    @classmethod
    def from_dict(cls, d: dict) -> "CirculationLaw":
        kind = d.get("kind")
        if kind == "constant":
            return cls.constant(float(d.get("value", 1.0)))
        if kind == "uniform":
            return cls.uniform(float(d.get("A", 1.0)))
        if kind == "two_point":
            return cls.two_point(float(d.get("A", 1.0)), float(d.get("p", 0.5)))
        raise InvalidParameter(f"unknown circulation law {kind!r}")


def sample_circulations(law: CirculationLaw, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. circulations; deterministic for a given seed."""
    if n < 1:
        raise InvalidParameter(f"need n >= 1 circulations, got {n}")
    rng = np.random.default_rng(seed)
    if law.kind == "constant":
        return np.full(n, float(law.value))
    if law.kind == "uniform":
        return rng.uniform(-law.A, law.A, size=n)
    up = rng.random(n) < law.p
    return np.where(up, law.A, -law.A)


def rescale_to_unit(A: float, positions, sigma: float, law: CirculationLaw | None = None):
    """Rescale a system with circulation bound ``A`` to one with bound 1.

    Positions are divided by ``sqrt(A)``, circulations by ``A`` and the
    viscosity becomes ``sigma / A``.  Returns ``(positions, sigma, law)``
    where ``law`` is ``None`` if no law was passed.
    """
    if not A > 0:
        raise InvalidParameter(f"rescaling needs A > 0, got {A}")
    y = np.asarray(positions, dtype=float) / math.sqrt(A)
    new_law = None if law is None else law.scaled(1.0 / A)
    return y, sigma / A, new_law
