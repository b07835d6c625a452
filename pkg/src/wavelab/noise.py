"""Q-Wiener increments, exact Ornstein-Uhlenbeck steps and seeded streams.

Every random draw in the package comes from an :class:`RngStream`, a
Philox counter-based generator keyed by ``(master_seed, trajectory,
purpose)``.  Streams never share state, so an ensemble gives the same
numbers whatever order (or thread) its trajectories run in.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .spectral import SineBasis, SpectralField


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal covariance ``Q e_k = b_k e_k`` plus the noise exponent alpha."""

    b: tuple
    alpha: float = 0.5
    kind: str = "custom"

    def __post_init__(self):
        b = tuple(float(x) for x in np.atleast_1d(self.b))
        if not b:
            raise ValueError("noise model needs at least one eigenvalue")
        if any(not np.isfinite(x) or x < 0 for x in b):
            raise ValueError("covariance eigenvalues must be finite and nonnegative")
        if not 0.0 <= self.alpha <= 0.5:
            raise ValueError(f"alpha must lie in [0, 1/2], got {self.alpha}")
        object.__setattr__(self, "b", b)

    @classmethod
    def power_law(cls, K, r=4.0, alpha=0.5, scale=1.0):
        """b_k = scale * k**(-r); r > 3 keeps B_1 finite without truncation."""
        k = np.arange(1, K + 1, dtype=float)
        return cls(tuple(scale * k ** (-r)), alpha=alpha, kind="power-law")

    @property
    def K(self):
        return len(self.b)

    @property
    def array(self):
        return np.asarray(self.b)

    def padded(self, K):
        """Eigenvalues for the first ``K`` modes (zeros past the truncation)."""
        out = np.zeros(K)
        n = min(K, self.K)
        out[:n] = self.b[:n]
        return out


def b_sums(model):
    """(B_0, B_1) = (sum b_k, sum k^2 b_k) over the truncation."""
    b = model.array
    k = np.arange(1, b.size + 1, dtype=float)
    return float(b.sum()), float(np.dot(k**2, b))


def _purpose_key(purpose):
    digest = hashlib.blake2b(str(purpose).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """Independent, reproducible stream of draws for one (trajectory, purpose)."""

    master_seed: int
    trajectory: int
    purpose: str
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master seed must fit in 64 unsigned bits")
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed),
            spawn_key=(int(self.trajectory), _purpose_key(self.purpose)),
        )
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def generator(self):
        return self._gen

    def normal(self, size=None):
        return self._gen.standard_normal(size)


def derive_stream(master_seed, trajectory_id, purpose):
    return RngStream(int(master_seed), int(trajectory_id), str(purpose))


def standard_normal(rng, size=None):
    """Draw from an RngStream or a plain numpy Generator."""
    if isinstance(rng, RngStream):
        return rng.normal(size)
    return rng.standard_normal(size)


def sample_wiener_increment(model, h, rng, basis=None):
    """W(t+h) - W(t) in the orthonormal basis: mode k ~ N(0, b_k h)."""
    if not h > 0:
        raise ValueError(f"time step must be positive, got {h}")
    basis = basis or SineBasis(model.K)
    b = model.padded(basis.K)
    z = standard_normal(rng, basis.K)
    return SpectralField(basis, np.sqrt(b * h) * z)


def ou_transition(mu, h):
    """(decay, stationary-normalized variance) of one exact OU step."""
    decay = np.exp(-mu * h)
    var = -np.expm1(-2.0 * mu * h) / (2.0 * mu)
    return decay, var


def ou_exact_step(z, mu, m, h, diffusion, rng=None, normal=None):
    """Exact step of dz = -mu (z - m) dt + diffusion dW over time ``h``.

    Works elementwise on arrays.  Supply either ``rng`` or pre-drawn
    standard normals via ``normal``.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0) or not h > 0:
        raise ValueError("need mu > 0 and h > 0")
    decay, var = ou_transition(mu, h)
    z = np.asarray(z, dtype=float)
    if normal is None:
        shape = np.broadcast(z, mu, m, diffusion).shape
        if rng is not None:
            normal = standard_normal(rng, shape)
        elif np.any(np.asarray(diffusion) != 0):
            raise ValueError("a random source is required when diffusion is nonzero")
        else:
            normal = 0.0
    out = m + decay * (z - m) + np.asarray(diffusion) * np.sqrt(var) * normal
    return out if np.ndim(out) else float(out)
