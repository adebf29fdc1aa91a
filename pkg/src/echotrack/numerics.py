"""Deterministic numeric kernels: Hermitian eigendecomposition, least squares,
and labeled counter-based RNG streams.

The eigen/least-squares routines are thin contract-checking wrappers over
LAPACK (via numpy); the contracts (tolerances, ordering, error types) are the
interface the rest of the package relies on.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import ContractViolationError, DimensionError, SingularMatrixError

HERMITIAN_RTOL = 1e-9


def hermitian_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix.

    Returns (eigenvalues, eigenvectors) with real eigenvalues sorted in
    descending order and orthonormal eigenvectors as matching columns.

    Raises DimensionError for non-square input and ContractViolationError if
    the matrix is not Hermitian within relative tolerance 1e-9.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = np.linalg.norm(m)
    if scale > 0 and np.linalg.norm(m - m.conj().T) > HERMITIAN_RTOL * scale:
        raise ContractViolationError("matrix is not Hermitian within tolerance")
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    return vals[order].astype(np.float64), vecs[:, order]


def least_squares(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution of a x = b for tall full-rank a.

    Raises SingularMatrixError (carrying the effective rank) when a is
    rank-deficient, DimensionError when a has fewer rows than columns.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise DimensionError(f"need rows >= cols, got shape {a.shape}")
    x, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < a.shape[1]:
        raise SingularMatrixError(
            f"rank-deficient system: rank {rank} < {a.shape[1]} columns",
            effective_rank=int(rank),
        )
    return x


def _label_entropy(seed: int, label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = struct.unpack("<8I", digest)
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, *words]


class RngStream:
    """Labeled, reproducible random stream backed by the counter-based Philox
    generator.

    The stream position derives solely from (seed, label, number of draws),
    so distinct labels give statistically independent streams and replaying a
    fresh stream with the same (seed, label) reproduces every draw exactly.
    A stream instance must have a single concurrent user.
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = label
        ss = np.random.SeedSequence(_label_entropy(seed, label))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, label: str) -> "RngStream":
        """Independent child stream; e.g. stream.substream("k3")."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def clone(self) -> "RngStream":
        """Copy with identical state; the twin replays the same draws."""
        twin = RngStream(self.seed, self.label)
        twin._gen.bit_generator.state = self._gen.bit_generator.state
        return twin

    def normal(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal draws (float64)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self._gen.standard_normal(n)

    def cnormal(self, n: int, var: float = 1.0) -> np.ndarray:
        """n i.i.d. circularly-symmetric complex normal draws CN(0, var)."""
        raw = self.normal(2 * n) * np.sqrt(var / 2.0)
        return raw[0::2] + 1j * raw[1::2]

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers in [low, high)."""
        return self._gen.integers(low, high, n)

    def bernoulli(self, p: float, n: int = 1) -> np.ndarray:
        return self._gen.uniform(0.0, 1.0, n) < p

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def rng_draw_gaussian(stream: RngStream, n: int) -> np.ndarray:
    """Draw n standard normal values from the stream."""
    return stream.normal(n)
