"""
Two-photon interference engine.

Photon H enters through the H block of the TM with input amplitudes u and
photon V through the V block with v. At an output pair (x, y) a coincidence
happens along two pathways: H at x and V at y (A1) or H at y and V at x (A2).
Their interference is weighted by the mutual coherence V of the photons:

    R = |A1|^2 + |A2|^2 + 2 V Re(A1 conj(A2))

The full two-photon transmission matrix has (n_in_h n_in_v) x n_out^2
entries and is never materialized; blocks are built on demand.
"""

from dataclasses import dataclass
from itertools import permutations
from math import factorial
from typing import TYPE_CHECKING, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionError, RangeError, UndefinedContrastError, UnsupportedConfigurationError
from .numcore import ComplexVector, as_complex_vector
from .tmrecon import TransmissionMatrix

if TYPE_CHECKING:
    from .virtlab import OutputPosition

PositionLike = Union[int, "OutputPosition"]

NORM_TOLERANCE = 1e-12


def position_index(pos: PositionLike) -> int:
    return int(getattr(pos, "index", pos))


# --- Types ---
@dataclass(frozen=True)
class TwoPhotonInput:
    u: ComplexVector
    v: ComplexVector
    descriptor: str = ""

    def __post_init__(self):
        u = as_complex_vector(self.u, "u")
        v = as_complex_vector(self.v, "v")
        for name, vec in (("u", u), ("v", v)):
            norm = np.linalg.norm(vec)
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise RangeError(f"Input amplitudes {name} must have unit norm, got {norm:.15f}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def normalized(cls, u, v, descriptor: str = "") -> "TwoPhotonInput":
        u = as_complex_vector(u, "u")
        v = as_complex_vector(v, "v")
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            raise RangeError("Input amplitudes cannot be all zero")
        return cls(u / nu, v / nv, descriptor)

    @classmethod
    def from_modes(cls, i: int, j: int, n_in_h: int, n_in_v: int) -> "TwoPhotonInput":
        """Photon H in H-basis mode i, photon V in V-basis mode j."""
        if not (0 <= i < n_in_h and 0 <= j < n_in_v):
            raise RangeError(f"Modes ({i}, {j}) outside the ({n_in_h}, {n_in_v}) input halves")
        u = np.zeros(n_in_h, dtype=np.complex128)
        v = np.zeros(n_in_v, dtype=np.complex128)
        u[i] = 1.0
        v[j] = 1.0
        return cls(u, v, f"H{i}V{j}")

    @classmethod
    def from_patterns(cls, pattern_h, pattern_v, descriptor: str = "") -> "TwoPhotonInput":
        """Fields induced by a pair of phase-only SLM patterns."""
        return cls(pattern_h.field(), pattern_v.field(), descriptor)


@dataclass(frozen=True)
class PairAmplitudes:
    a1: complex
    a2: complex
    x: int
    y: int


@dataclass(frozen=True)
class TtmBlock:
    rates: NDArray[np.float64]
    visibility: float
    input_labels: Tuple[str, ...]
    pairs: Tuple[Tuple[int, int], ...]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rates.shape


@dataclass(frozen=True)
class ContrastMatrix:
    values: NDArray[np.float64]
    sigma: Optional[NDArray[np.float64]]
    undefined: NDArray[np.bool_]
    delta_near: float
    delta_far: float


@dataclass(frozen=True)
class TwoPhotonDistribution:
    """
    Output statistics indexed by unordered output pair: entry [x, y] == [y, x]
    is the probability of one photon at x and one at y (both at x on the
    diagonal). The upper triangle sums to the transmitted pair probability.
    """

    indistinguishable: NDArray[np.float64]
    distinguishable: NDArray[np.float64]

    def total(self, which: str = "indistinguishable") -> float:
        return float(np.sum(np.triu(getattr(self, which))))


class CoherenceModel(Protocol):
    def mutual_coherence(self, delta_mm: float) -> float: ...


# --- Amplitudes and rates ---
def output_fields(T: TransmissionMatrix, inp: TwoPhotonInput) -> Tuple[ComplexVector, ComplexVector]:
    """Single-photon output fields e_H = T_H u and e_V = T_V v."""
    if inp.u.shape[0] != T.n_in_h or inp.v.shape[0] != T.n_in_v:
        raise DimensionError(
            f"Input sizes ({inp.u.shape[0]}, {inp.v.shape[0]}) do not match TM halves ({T.n_in_h}, {T.n_in_v})"
        )
    return T.h_block @ inp.u, T.v_block @ inp.v


def _check_pair(x: int, y: int, n_out: int) -> None:
    if x == y:
        raise UnsupportedConfigurationError(f"Same-position coincidences (x = y = {x}) are not measurable")
    for p in (x, y):
        if not 0 <= p < n_out:
            raise RangeError(f"Output position {p} outside 0..{n_out - 1}")


def pair_amplitude(T: TransmissionMatrix, inp: TwoPhotonInput, x: PositionLike, y: PositionLike) -> PairAmplitudes:
    xi, yi = position_index(x), position_index(y)
    _check_pair(xi, yi, T.n_out)
    e_h, e_v = output_fields(T, inp)
    return PairAmplitudes(a1=complex(e_h[xi] * e_v[yi]), a2=complex(e_h[yi] * e_v[xi]), x=xi, y=yi)


def _check_visibility(V: float) -> None:
    if not 0.0 <= V <= 1.0:
        raise RangeError(f"Interference weight V must lie in [0, 1], got {V}")


def _rate(a1, a2, V):
    rate = np.abs(a1) ** 2 + np.abs(a2) ** 2 + 2.0 * V * np.real(a1 * np.conj(a2))
    # Cauchy-Schwarz keeps this >= 0; clip rounding residue
    return np.maximum(rate, 0.0)


def coincidence_rate(amps: PairAmplitudes, V: float) -> float:
    _check_visibility(V)
    return float(_rate(amps.a1, amps.a2, V))


def build_ttm_block(
    T: TransmissionMatrix,
    inputs: Sequence[TwoPhotonInput],
    pairs: Sequence[Tuple[PositionLike, PositionLike]],
    V: float,
) -> TtmBlock:
    """Rows follow `inputs`, columns follow `pairs`."""
    if not inputs or not pairs:
        raise DimensionError("build_ttm_block needs at least one input and one output pair")
    _check_visibility(V)
    index_pairs = [(position_index(x), position_index(y)) for x, y in pairs]
    for x, y in index_pairs:
        _check_pair(x, y, T.n_out)
    xs = np.array([p[0] for p in index_pairs])
    ys = np.array([p[1] for p in index_pairs])

    rates = np.empty((len(inputs), len(index_pairs)), dtype=np.float64)
    for row, inp in enumerate(inputs):
        e_h, e_v = output_fields(T, inp)
        rates[row] = _rate(e_h[xs] * e_v[ys], e_h[ys] * e_v[xs], V)
    return TtmBlock(
        rates=rates,
        visibility=float(V),
        input_labels=tuple(inp.descriptor for inp in inputs),
        pairs=tuple(index_pairs),
    )


# --- Non-classical contrast ---
def nonclassical_contrast(r_near: float, r_far: float) -> float:
    """C = (R_near - R_far) / R_far."""
    if r_far < 0:
        raise RangeError(f"Distinguishable rate must be >= 0, got {r_far}")
    if r_far == 0:
        raise UndefinedContrastError("Contrast is undefined when the distinguishable rate is zero")
    return (r_near - r_far) / r_far


def contrast_sigma(r_near, r_far, n_near, n_far):
    """Poisson propagation: sigma_C ~ (R_near/R_far) sqrt(1/N_near + 1/N_far)."""
    r_near, r_far = np.asarray(r_near, float), np.asarray(r_far, float)
    n_near, n_far = np.asarray(n_near, float), np.asarray(n_far, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = (r_near / r_far) * np.sqrt(1.0 / n_near + 1.0 / n_far)
    return np.where((r_far > 0) & (n_near > 0) & (n_far > 0), sigma, np.nan)


def contrast_matrix(
    near,
    far,
    counts_near=None,
    counts_far=None,
    delta_near: float = 0.0,
    delta_far: float = 0.4,
) -> ContrastMatrix:
    """Entrywise contrast; undefined entries become NaN and are flagged."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if near.shape != far.shape:
        raise DimensionError(f"Rate matrices differ in shape: {near.shape} vs {far.shape}")
    if np.any(far < 0):
        raise RangeError("Distinguishable rates must be >= 0")
    undefined = far == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(undefined, np.nan, (near - far) / far)
    sigma = None
    if counts_near is not None and counts_far is not None:
        sigma = contrast_sigma(near, far, counts_near, counts_far)
    return ContrastMatrix(values=values, sigma=sigma, undefined=undefined, delta_near=delta_near, delta_far=delta_far)


# --- HOM curves ---
def hom_curve(
    T: TransmissionMatrix,
    inp: TwoPhotonInput,
    x: PositionLike,
    y: PositionLike,
    deltas: Sequence[float],
    coherence: CoherenceModel,
) -> List[Tuple[float, float]]:
    """Predicted R(delta) at (x, y); symmetric in delta because V(delta) is."""
    if len(deltas) == 0:
        raise DimensionError("hom_curve needs at least one delay value")
    amps = pair_amplitude(T, inp, x, y)
    return [(float(d), coincidence_rate(amps, coherence.mutual_coherence(d))) for d in deltas]


def classify_hom_curve(curve: Sequence[Tuple[float, float]], flat_tolerance: float = 0.02) -> str:
    """'peak', 'dip' or 'flat' by comparing R at the smallest |delta| with R at the largest."""
    if len(curve) < 2:
        raise DimensionError("Classifying a HOM curve needs at least two points")
    ordered = sorted(curve, key=lambda point: abs(point[0]))
    r_zero = ordered[0][1]
    far_delta = abs(ordered[-1][0])
    r_far = float(np.mean([r for d, r in curve if abs(d) == far_delta]))
    if r_far <= 0:
        raise UndefinedContrastError("Cannot classify a HOM curve whose far-delay rate is zero")
    relative = (r_zero - r_far) / r_far
    if abs(relative) < flat_tolerance:
        return "flat"
    return "peak" if relative > 0 else "dip"


# --- Brute-force oracle ---
def permanent(m) -> complex:
    """Permanent by explicit permutation sum (small matrices only)."""
    arr = np.asarray(m)
    n = arr.shape[0]
    total = 0j
    for perm in permutations(range(n)):
        prod = 1 + 0j
        for row in range(n):
            prod *= arr[row, perm[row]]
        total += prod
    return total


def brute_force_two_photon(T: TransmissionMatrix, inp: TwoPhotonInput) -> TwoPhotonDistribution:
    """
    Evolve a_H^dag(u) a_V^dag(v)|0> and enumerate every output occupation
    with two photons. Indistinguishable probabilities come from |perm(M)|^2,
    distinguishable ones from perm(|M|^2), both divided by the occupation
    factorials.
    """
    e_h, e_v = output_fields(T, inp)
    n_out = T.n_out
    quantum = np.zeros((n_out, n_out))
    classical = np.zeros((n_out, n_out))
    for x in range(n_out):
        for y in range(x, n_out):
            sub = np.array([[e_h[x], e_v[x]], [e_h[y], e_v[y]]])
            multiplicity = factorial(2) if x == y else 1
            quantum[x, y] = abs(permanent(sub)) ** 2 / multiplicity
            classical[x, y] = permanent(np.abs(sub) ** 2).real / multiplicity
            quantum[y, x] = quantum[x, y]
            classical[y, x] = classical[x, y]
    return TwoPhotonDistribution(indistinguishable=quantum, distinguishable=classical)
