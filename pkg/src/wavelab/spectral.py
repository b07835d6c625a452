"""Sine-basis fields on (0, pi) with homogeneous Dirichlet conditions.

Mode ``k`` (1-based) is either the orthonormal function
``sqrt(2/pi) * sin(k x)`` or the plain ``sin(k x)``; the Laplacian acts
diagonally with eigenvalue ``-k**2``.  Point values live on the interior
nodes ``x_j = j pi / (M + 1)``, where the discrete sine transform (DST-I)
is an exact quadrature for products of retained modes.

The array-level helpers (``synthesize_array`` and friends) operate on the
last axis, so an ensemble of shape ``(n_traj, K)`` goes through one call.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import fft

from .errors import DealiasingError, SizingError

ORTHONORMAL_SCALE = np.sqrt(2.0 / np.pi)


class Normalization(str, Enum):
    ORTHONORMAL = "orthonormal"
    PLAIN = "plain"


@dataclass(frozen=True)
class SineBasis:
    K: int
    normalization: Normalization = Normalization.ORTHONORMAL

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise SizingError(f"K must be a positive integer, got {self.K!r}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "normalization", Normalization(self.normalization))

    @property
    def scale(self):
        """Amplitude of mode k relative to sin(kx)."""
        return ORTHONORMAL_SCALE if self.normalization is Normalization.ORTHONORMAL else 1.0

    @property
    def gram(self):
        """Diagonal of the L2(0, pi) Gram matrix of the basis."""
        return 1.0 if self.normalization is Normalization.ORTHONORMAL else np.pi / 2.0

    @property
    def wavenumbers(self):
        return np.arange(1, self.K + 1, dtype=float)

    @property
    def eigenvalues(self):
        """lambda_k = k**2, the eigenvalues of -d^2/dx^2."""
        return self.wavenumbers**2

    def conversion_to(self, other):
        """Factor multiplying coefficients when changing to ``other``'s normalization."""
        return self.scale / other.scale


@dataclass(frozen=True)
class Grid:
    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise SizingError(f"M must be a positive integer, got {self.M!r}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def nodes(self):
        return np.arange(1, self.M + 1) * np.pi / (self.M + 1)

    @classmethod
    def dealiased(cls, K):
        """Smallest grid accepted by :func:`cubic_f` for ``K`` modes."""
        return cls(3 * K + 1)


class SpectralField:
    """Immutable coefficient vector against a :class:`SineBasis`."""

    __slots__ = ("basis", "coeffs")

    def __init__(self, basis, coeffs):
        coeffs = np.array(coeffs, dtype=float)
        if coeffs.ndim != 1 or coeffs.shape[0] != basis.K:
            raise SizingError(f"expected {basis.K} coefficients, got shape {coeffs.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("field coefficients must be finite")
        coeffs.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "coeffs", coeffs)

    def __setattr__(self, name, value):
        raise AttributeError("SpectralField is immutable")

    @classmethod
    def zeros(cls, basis):
        return cls(basis, np.zeros(basis.K))

    @classmethod
    def mode(cls, basis, k, amplitude=1.0):
        c = np.zeros(basis.K)
        c[k - 1] = amplitude
        return cls(basis, c)

    @property
    def K(self):
        return self.basis.K

    def _check(self, other):
        if not isinstance(other, SpectralField) or other.basis != self.basis:
            raise SizingError("fields live on different bases")

    def __add__(self, other):
        self._check(other)
        return SpectralField(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return SpectralField(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SpectralField(self.basis, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.basis, -self.coeffs)

    def __eq__(self, other):
        return (isinstance(other, SpectralField) and other.basis == self.basis
                and np.array_equal(other.coeffs, self.coeffs))

    def __hash__(self):
        return hash((self.basis, self.coeffs.tobytes()))

    def __repr__(self):
        return f"SpectralField(K={self.K}, {self.basis.normalization.value}, coeffs={self.coeffs!r})"

    def to(self, basis):
        """Re-express this field in ``basis`` (same K or truncated/padded)."""
        c = np.zeros(basis.K)
        n = min(basis.K, self.K)
        c[:n] = self.coeffs[:n] * self.basis.conversion_to(basis)
        return SpectralField(basis, c)


# -- array kernels ------------------------------------------------------------

def synthesize_array(coeffs, M, scale=1.0):
    """Point values on an ``M``-node grid from coefficients on the last axis."""
    coeffs = np.asarray(coeffs, dtype=float)
    K = coeffs.shape[-1]
    if M < K:
        raise SizingError(f"grid with M={M} nodes cannot represent K={K} modes")
    padded = np.zeros(coeffs.shape[:-1] + (M,))
    padded[..., :K] = coeffs
    # DST-I: y_n = 2 sum_k c_k sin(pi (k+1)(n+1) / (M+1))
    return fft.dst(padded, type=1, axis=-1) * (0.5 * scale)


def analyze_array(values, K, scale=1.0):
    """Discrete sine quadrature; exact inverse of :func:`synthesize_array`."""
    values = np.asarray(values, dtype=float)
    M = values.shape[-1]
    if K > M:
        raise SizingError(f"cannot extract K={K} modes from M={M} nodes")
    c = fft.dst(values, type=1, axis=-1)[..., :K]
    return c / ((M + 1) * scale)


def cubic_array(coeffs, beta, M, scale=1.0):
    """Projection of ``beta u - u**3`` onto the retained modes."""
    coeffs = np.asarray(coeffs, dtype=float)
    K = coeffs.shape[-1]
    if M < 3 * K + 1:
        raise DealiasingError(f"cubic projection of K={K} modes needs M >= {3 * K + 1}, got {M}")
    u = synthesize_array(coeffs, M, scale)
    return beta * coeffs - analyze_array(u**3, K, scale)


def cubic_convolution(coeffs, beta=0.0, scale=1.0):
    """Projection of ``beta u - u**3`` by the direct triple sum over modes.

    Uses sin a sin b sin c = [sin(c+a-b) + sin(c-a+b) - sin(c+a+b) - sin(c-a-b)] / 4.
    O(K^3); kept as an independent reference for the collocation path.
    """
    c = np.asarray(coeffs, dtype=float) * scale
    K = c.shape[0]
    cube = np.zeros(3 * K + 1)
    for a in range(1, K + 1):
        for b in range(1, K + 1):
            ab = c[a - 1] * c[b - 1]
            if ab == 0.0:
                continue
            for d in range(1, K + 1):
                w = 0.25 * ab * c[d - 1]
                for m, sign in ((d + a - b, 1.0), (d - a + b, 1.0), (d + a + b, -1.0), (d - a - b, -1.0)):
                    if m > 0:
                        cube[m] += sign * w
                    elif m < 0:
                        cube[-m] -= sign * w
    return beta * np.asarray(coeffs, dtype=float) - cube[1:K + 1] / scale


# -- field operations ---------------------------------------------------------

def synthesize(field, grid):
    """Point values of ``field`` at the grid nodes."""
    return synthesize_array(field.coeffs, grid.M, field.basis.scale)


def analyze(values, grid, basis):
    """Coefficients of the band-limited interpolant of ``values``."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.shape[0] != grid.M:
        raise SizingError(f"expected {grid.M} point values, got shape {values.shape}")
    return SpectralField(basis, analyze_array(values, basis.K, basis.scale))


def laplacian(field):
    return SpectralField(field.basis, -field.basis.eigenvalues * field.coeffs)


def sobolev_norm(field, s):
    """||A^{s/2} u||_0 with A = -d^2/dx^2."""
    weights = field.basis.eigenvalues ** s
    return float(np.sqrt(field.basis.gram * np.sum(weights * field.coeffs**2)))


def cubic_f(field, beta, grid):
    """Galerkin projection of ``f(u) = beta u - u**3`` onto the field's modes."""
    return SpectralField(field.basis, cubic_array(field.coeffs, beta, grid.M, field.basis.scale))


def inner(a, b):
    """L2(0, pi) inner product."""
    a._check(b)
    return float(a.basis.gram * np.dot(a.coeffs, b.coeffs))


def grad_inner(a, b):
    """<grad a, grad b> = sum lambda_k a_k b_k (times the Gram factor)."""
    a._check(b)
    return float(a.basis.gram * np.dot(a.basis.eigenvalues * a.coeffs, b.coeffs))
