"""
Complex linear algebra primitives and Haar-random unitary sampling.

Every stochastic routine in the package takes an explicit seed (or a
generator derived from one), so experiments are bit-reproducible.
"""

from dataclasses import dataclass
from typing import List, Union

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import dft, qr

from .errors import DimensionError, RangeError

ComplexVector = NDArray[np.complex128]
ComplexMatrix = NDArray[np.complex128]

SeedLike = Union[int, np.random.SeedSequence]


# --- Random streams ---
def make_rng(seed: SeedLike) -> np.random.Generator:
    """PCG64 generator for an integer seed or a spawned SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed < 0 or seed >= 2**64:
        raise RangeError(f"Seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_streams(seed: int, count: int) -> List[np.random.Generator]:
    """Independent child generators, e.g. one per grid point of a sweep."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [make_rng(child) for child in children]


# --- Validation helpers ---
def as_complex_matrix(values, name: str = "matrix") -> ComplexMatrix:
    arr = np.asarray(values, dtype=np.complex128)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must have positive dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


def as_complex_vector(values, name: str = "vector") -> ComplexVector:
    arr = np.asarray(values, dtype=np.complex128)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


# --- Unitaries ---
@dataclass(frozen=True)
class UnitaryMatrix:
    matrix: ComplexMatrix
    seed: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def haar_unitary(dim: int, seed: int) -> UnitaryMatrix:
    """
    Haar-distributed unitary of size dim x dim.

    QR of a complex Ginibre matrix, then the columns of Q are multiplied by
    the phases of diag(R) so that the implied R has a positive real diagonal.
    Without that correction the result is orthonormal but not Haar.
    """
    if dim < 1:
        raise DimensionError(f"Unitary dimension must be >= 1, got {dim}")
    rng = make_rng(seed)
    ginibre = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2.0)
    q, r = qr(ginibre)
    diag = np.diag(r)
    phases = diag / np.abs(diag)
    return UnitaryMatrix(matrix=np.ascontiguousarray(q * phases), seed=seed)


def unitarity_defect(m) -> float:
    """Max-norm of M^dagger M - I."""
    arr = as_complex_matrix(m, "M")
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"unitarity_defect needs a square matrix, got shape {arr.shape}")
    gram = arr.conj().T @ arr
    return float(np.max(np.abs(gram - np.eye(arr.shape[0]))))


def dft_matrix(n: int) -> ComplexMatrix:
    """Unitary DFT matrix; its columns are the phase-ramp patterns of an SLM half."""
    if n < 1:
        raise DimensionError(f"DFT size must be >= 1, got {n}")
    return dft(n, scale="sqrtn")


def wrap_phase(phases):
    """Map phases into the canonical range [0, 2*pi)."""
    wrapped = np.mod(phases, 2 * np.pi)
    # mod can return exactly 2*pi for tiny negative inputs
    return np.where(wrapped >= 2 * np.pi, 0.0, wrapped)


def wrap_to_pi(phase: float) -> float:
    return float((phase + np.pi) % (2 * np.pi) - np.pi)
