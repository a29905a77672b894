"""Fixed-order sine/cosine Fourier series for 3D trajectories.

A trajectory over normalized time is stored per axis as

    f(t) = a_0 / 2 + sum_{n=1..N} a_n cos(w n t) + b_n sin(w n t)

with ``w`` the angular scale. ``w = 2*pi`` gives a period-1 orthogonal basis
on [0, 1); ``w = 1`` evaluates the printed formula literally.

Coefficients live in a single ``(3, 2N+1)`` array laid out per axis as
``a_0..a_N, b_1..b_N``; that is also the on-disk order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

TWO_PI = 2.0 * math.pi
DEFAULT_HARMONICS = 6


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when an unregularized least-squares fit has no unique solution."""


def basis(t, n_harmonics: int, angular_scale: float = TWO_PI) -> np.ndarray:
    """Design matrix of the Fourier basis at times ``t``.

    Returns an array of shape ``t.shape + (2N+1,)`` whose columns are
    ``1/2, cos(w t), ..., cos(N w t), sin(w t), ..., sin(N w t)``.
    """
    t = np.asarray(t, dtype=float)
    n = np.arange(1, n_harmonics + 1, dtype=float)
    arg = angular_scale * t[..., None] * n
    half = np.full(t.shape + (1,), 0.5)
    return np.concatenate([half, np.cos(arg), np.sin(arg)], axis=-1)


def basis_derivative(t, n_harmonics: int, angular_scale: float, order: int) -> np.ndarray:
    """Term-wise time derivative of :func:`basis` (orders 1 and 2)."""
    if order not in (1, 2):
        raise ValueError(f"unsupported derivative order {order}; expected 1 or 2")
    t = np.asarray(t, dtype=float)
    k = angular_scale * np.arange(1, n_harmonics + 1, dtype=float)
    arg = t[..., None] * k
    zero = np.zeros(t.shape + (1,))
    if order == 1:
        return np.concatenate([zero, -k * np.sin(arg), k * np.cos(arg)], axis=-1)
    k2 = k * k
    return np.concatenate([zero, -k2 * np.cos(arg), -k2 * np.sin(arg)], axis=-1)


@dataclass(frozen=True)
class FourierSeries3:
    """One 3D trajectory as three real Fourier series sharing ``N`` and ``w``.

    Attributes:
        coeffs: ``(3, 2N+1)`` array, rows x/y/z, columns ``a_0..a_N, b_1..b_N``.
        angular_scale: radians per unit normalized time.
    """

    coeffs: np.ndarray
    angular_scale: float = TWO_PI

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 2 or c.shape[0] != 3 or c.shape[1] % 2 != 1:
            raise ValueError(f"coefficient array must be (3, 2N+1), got {c.shape}")
        if not self.angular_scale > 0:
            raise ValueError("angular_scale must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "angular_scale", float(self.angular_scale))

    @classmethod
    def from_parts(cls, cos_coeffs, sin_coeffs, angular_scale: float = TWO_PI) -> FourierSeries3:
        cos_coeffs = np.asarray(cos_coeffs, dtype=float).reshape(3, -1)
        n = cos_coeffs.shape[1] - 1
        sin_coeffs = np.asarray(sin_coeffs, dtype=float).reshape(3, n)
        return cls(np.concatenate([cos_coeffs, sin_coeffs], axis=1), angular_scale)

    @classmethod
    def zeros(cls, n_harmonics: int = DEFAULT_HARMONICS, angular_scale: float = TWO_PI) -> FourierSeries3:
        return cls(np.zeros((3, 2 * n_harmonics + 1)), angular_scale)

    @classmethod
    def constant(cls, point, n_harmonics: int = DEFAULT_HARMONICS, angular_scale: float = TWO_PI) -> FourierSeries3:
        c = np.zeros((3, 2 * n_harmonics + 1))
        c[:, 0] = 2.0 * np.asarray(point, dtype=float)
        return cls(c, angular_scale)

    @property
    def n_harmonics(self) -> int:
        return (self.coeffs.shape[1] - 1) // 2

    @property
    def cos_coeffs(self) -> np.ndarray:
        return self.coeffs[:, : self.n_harmonics + 1]

    @property
    def sin_coeffs(self) -> np.ndarray:
        return self.coeffs[:, self.n_harmonics + 1 :]

    @property
    def period(self) -> float:
        return TWO_PI / self.angular_scale

    def vector(self) -> np.ndarray:
        """Flat coefficient vector of length 6N+3 (axis-major)."""
        return self.coeffs.reshape(-1).copy()

    def __call__(self, t) -> np.ndarray:
        return self.eval(t)

    def eval(self, t) -> np.ndarray:
        """Position(s) at time ``t``; scalar t gives shape (3,), arrays add a leading shape."""
        return basis(t, self.n_harmonics, self.angular_scale) @ self.coeffs.T

    def eval_derivative(self, t, order: int = 1) -> np.ndarray:
        return basis_derivative(t, self.n_harmonics, self.angular_scale, order) @ self.coeffs.T

    def smoothness_energy(self) -> float:
        """Closed-form integral of ``|f''(t)|^2`` over one period."""
        n = np.arange(1, self.n_harmonics + 1, dtype=float)
        k4 = (self.angular_scale * n) ** 4
        power = self.cos_coeffs[:, 1:] ** 2 + self.sin_coeffs**2
        return float(np.sum(k4 * power) * self.period / 2.0)

    def __add__(self, other: FourierSeries3) -> FourierSeries3:
        _check_compatible(self, other)
        return FourierSeries3(self.coeffs + other.coeffs, self.angular_scale)

    def __sub__(self, other: FourierSeries3) -> FourierSeries3:
        _check_compatible(self, other)
        return FourierSeries3(self.coeffs - other.coeffs, self.angular_scale)

    def scaled(self, factor: float) -> FourierSeries3:
        return FourierSeries3(self.coeffs * factor, self.angular_scale)

    def to_dict(self) -> dict:
        return {
            "n_harmonics": self.n_harmonics,
            "angular_scale": self.angular_scale,
            "cos": self.cos_coeffs.tolist(),
            "sin": self.sin_coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> FourierSeries3:
        n = int(data["n_harmonics"])
        cos = np.asarray(data["cos"], dtype=float).reshape(3, n + 1)
        sin = np.asarray(data["sin"], dtype=float).reshape(3, n)
        return cls.from_parts(cos, sin, float(data["angular_scale"]))


def _check_compatible(a: FourierSeries3, b: FourierSeries3) -> None:
    if a.n_harmonics != b.n_harmonics or a.angular_scale != b.angular_scale:
        raise ValueError("series differ in harmonic count or angular scale")


@dataclass(frozen=True)
class TimedSamples3:
    """Discrete observations of a 3D trajectory.

    Times must be strictly increasing and lie in [0, 1]; the closed upper end
    allows endpoint-inclusive discretizations of one full period.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float).reshape(-1, 3)
        if len(t) != len(v):
            raise ValueError(f"{len(t)} times but {len(v)} values")
        if len(t) < 1:
            raise ValueError("at least one sample is required")
        if np.any(np.diff(t) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if t[0] < 0.0 or t[-1] > 1.0:
            raise ValueError("sample times must lie in [0, 1]")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.times)


def fit_projection(
    samples: TimedSamples3,
    n_harmonics: int = DEFAULT_HARMONICS,
    angular_scale: float = TWO_PI,
) -> FourierSeries3:
    """Approximate the projection integrals with the trapezoidal rule.

    ``a_n = 2 * trapz(f cos(w n t), t)`` and ``b_n = 2 * trapz(f sin(w n t), t)``
    over the sample span, with the span treated as one period. No wrap-around
    sample is added, so samples should cover a full period end to end.
    """
    if len(samples) < 2:
        raise ValueError("projection fitting needs at least 2 samples")
    t = samples.times
    phi = basis(t, n_harmonics, angular_scale)
    phi[:, 0] = 1.0
    # (K, 2N+1, 3) integrands
    integrand = phi[:, :, None] * samples.values[:, None, :]
    coeffs = 2.0 * np.trapezoid(integrand, t, axis=0)
    return FourierSeries3(coeffs.T, angular_scale)


def fit_least_squares(
    samples: TimedSamples3,
    n_harmonics: int = DEFAULT_HARMONICS,
    angular_scale: float = TWO_PI,
    ridge: float = 1e-8,
) -> FourierSeries3:
    """Ridge-regularized least-squares fit of a series to samples.

    Minimizes ``sum_k |f(t_k) - v_k|^2 + ridge * |c|^2`` per axis through the
    normal equations.

    Raises:
        RankDeficientError: ``ridge == 0`` and the design matrix is rank deficient.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    phi = basis(samples.times, n_harmonics, angular_scale)
    dim = phi.shape[1]
    if ridge == 0.0:
        rank = np.linalg.matrix_rank(phi)
        if rank < dim:
            raise RankDeficientError(
                f"design matrix has rank {rank} < {dim}; add samples or use ridge > 0"
            )
    gram = phi.T @ phi + ridge * np.eye(dim)
    rhs = phi.T @ samples.values
    coeffs = scipy.linalg.solve(gram, rhs, assume_a="pos")
    return FourierSeries3(coeffs.T, angular_scale)
