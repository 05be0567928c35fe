"""
Inverse design of phase-only SLM masks from a transmission matrix.

Single-photon focusing is phase conjugation of one TM row. Two-photon
targets go through the conjugated TTM row for the output pair (x, y):

    B[i, j] = conj(T[x, i] T[y, j] + T[y, i] T[x, j])     i in H, j in V

which has rank <= 2 and factors into separable (u, v) solutions: the
asymmetric one (each photon to its own spot) and the symmetric superposition
family. Phase-only projection turns any solution into a pair of masks.
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import svd
from scipy.optimize import curve_fit, least_squares

from .config import debug_enabled
from .errors import DegenerateTargetError, DimensionError, RangeError, UnsupportedConfigurationError
from .numcore import ComplexVector, as_complex_vector, wrap_phase, wrap_to_pi
from .tmrecon import TransmissionMatrix
from .ttm import (
    CoherenceModel,
    PositionLike,
    TwoPhotonInput,
    coincidence_rate,
    nonclassical_contrast,
    pair_amplitude,
    position_index,
)

Half = Literal["H", "V"]

DEFAULT_CALIBRATE_STEPS = 20
RANK_TOLERANCE = 1e-10
CALIBRATE_TOLERANCE = 1e-15


# --- Types ---
@dataclass(frozen=True)
class SlmPattern:
    """Phase mask over one SLM half, phases in [0, 2 pi)."""

    phases: NDArray[np.float64]
    half: Half
    zero_amplitude: Optional[NDArray[np.bool_]] = None

    def __post_init__(self):
        if self.half not in ("H", "V"):
            raise RangeError(f"SLM half must be 'H' or 'V', got {self.half!r}")
        phases = np.asarray(self.phases, dtype=np.float64)
        if phases.ndim != 1 or phases.size == 0:
            raise DimensionError(f"SLM pattern must be a non-empty 1-D phase vector, got shape {phases.shape}")
        if not np.all(np.isfinite(phases)):
            raise ValueError("SLM pattern contains NaN or Inf phases")
        phases = wrap_phase(phases)
        phases.setflags(write=False)
        object.__setattr__(self, "phases", phases)
        if self.zero_amplitude is not None:
            dark = np.array(self.zero_amplitude, dtype=bool)
            if dark.shape != phases.shape:
                raise DimensionError(f"zero_amplitude mask has shape {dark.shape}, expected {phases.shape}")
            if np.all(dark):
                raise RangeError("An SLM pattern must leave at least one mode lit")
            dark.setflags(write=False)
            object.__setattr__(self, "zero_amplitude", dark)

    @property
    def n_modes(self) -> int:
        return self.phases.shape[0]

    @classmethod
    def flat(cls, half: Half, n_modes: int) -> "SlmPattern":
        return cls(np.zeros(n_modes), half)

    def field(self) -> ComplexVector:
        """
        Unit-norm input field exp(i theta) / sqrt(N_lit). Modes flagged in
        zero_amplitude are blanked on the SLM and carry no light.
        """
        if self.zero_amplitude is None:
            return np.exp(1j * self.phases) / np.sqrt(self.n_modes)
        lit = ~self.zero_amplitude
        return np.where(lit, np.exp(1j * self.phases), 0.0) / np.sqrt(np.count_nonzero(lit))

    def shifted(self, offset: float) -> "SlmPattern":
        return SlmPattern(self.phases + offset, self.half, self.zero_amplitude)


@dataclass(frozen=True)
class SuperpositionTarget:
    x: PositionLike
    y: PositionLike
    phi_h: float = 0.0
    phi_v: float = 0.0

    def __post_init__(self):
        if position_index(self.x) == position_index(self.y):
            raise UnsupportedConfigurationError("A superposition target needs two distinct output positions")


@dataclass(frozen=True)
class TwoPhotonInputField:
    """Conjugated TTM row over (H input, V input) plus its rank-2 factors."""

    matrix: NDArray[np.complex128]
    x: int
    y: int
    x_h: ComplexVector
    y_h: ComplexVector
    x_v: ComplexVector
    y_v: ComplexVector

    def singular_values(self) -> NDArray[np.float64]:
        return svd(self.matrix, compute_uv=False)


@dataclass(frozen=True)
class SeparableSolution:
    u: ComplexVector
    v: ComplexVector
    family: str
    phi: float = 0.0

    def patterns(self) -> Tuple[SlmPattern, SlmPattern]:
        return phase_only_project(self.u, "H"), phase_only_project(self.v, "V")


@dataclass(frozen=True)
class CosineFit:
    amplitude: float
    phase_offset: float
    correlation: float


# --- Projection and focusing ---
def phase_only_project(field, half: Half = "H") -> SlmPattern:
    """
    Keep the phases of an ideal input field. Entries with zero amplitude get
    phase 0 and are flagged. The global phase is fixed by zeroing the first
    entry that carries amplitude.
    """
    f = as_complex_vector(field, "field")
    amplitude = np.abs(f)
    if not np.any(amplitude > 0):
        raise DegenerateTargetError("Cannot project an all-zero field onto a phase-only mask")
    zero = amplitude == 0
    phases = np.angle(f)
    phases = phases - phases[np.argmax(~zero)]
    phases[zero] = 0.0
    return SlmPattern(phases, half, zero_amplitude=zero if np.any(zero) else None)


def _row(T: TransmissionMatrix, pos: PositionLike, half: Half) -> ComplexVector:
    idx = position_index(pos)
    if not 0 <= idx < T.n_out:
        raise RangeError(f"Output position {idx} outside 0..{T.n_out - 1}")
    return T.block(half)[idx]


def focus_single(T: TransmissionMatrix, x: PositionLike, half: Half) -> SlmPattern:
    """Phase conjugation: theta_i = -arg T[x, i] over the half's columns."""
    row = _row(T, x, half)
    if not np.any(row != 0):
        raise DegenerateTargetError(f"TM row {position_index(x)} is zero on SLM half {half}")
    return phase_only_project(np.conj(row), half)


def focus_independent(T: TransmissionMatrix, x: PositionLike, y: PositionLike) -> Tuple[SlmPattern, SlmPattern]:
    """Photon H to x, photon V to y."""
    if position_index(x) == position_index(y):
        raise UnsupportedConfigurationError("Independent focusing needs two distinct output positions")
    return focus_single(T, x, "H"), focus_single(T, y, "V")


def _superposition_half(
    T: TransmissionMatrix, half: Half, x: PositionLike, y: PositionLike, phi: float, calibrate_steps: int
) -> SlmPattern:
    row_x, row_y = _row(T, x, half), _row(T, y, half)
    norm_x, norm_y = np.linalg.norm(row_x), np.linalg.norm(row_y)
    if norm_x == 0 or norm_y == 0:
        raise DegenerateTargetError(f"TM rows {position_index(x)}/{position_index(y)} vanish on SLM half {half}")
    a, b = np.conj(row_x) / norm_x, np.conj(row_y) / norm_y

    def project(params) -> SlmPattern:
        log_weight, phase = params
        return phase_only_project(np.exp(log_weight) * a + np.exp(1j * phase) * b, half)

    def mismatch(params) -> NDArray[np.float64]:
        # e(y) - exp(i phi) e(x), scaled so the target spots' brightness drops out
        field = project(params).field()
        e_x, e_y = row_x @ field, row_y @ field
        scale = np.hypot(abs(e_x), abs(e_y))
        if scale == 0:
            return np.array([1.0, 1.0])
        error = (e_y - np.exp(1j * phi) * e_x) / scale
        return np.array([error.real, error.imag])

    start = np.array([0.0, phi])
    if calibrate_steps == 0:
        return project(start)
    # every Levenberg-Marquardt step costs one evaluation plus two for the Jacobian
    fit = least_squares(
        mismatch, start, method="lm", xtol=CALIBRATE_TOLERANCE, ftol=CALIBRATE_TOLERANCE, gtol=CALIBRATE_TOLERANCE,
        max_nfev=3 * calibrate_steps,
    )
    residual = float(np.linalg.norm(fit.fun))
    if debug_enabled():
        print(f"DEBUG: [CONTROL] half {half} calibrated after {fit.nfev} evaluations, residual {residual:.3e}")
    if residual > 1e-6:
        print(f"[CONTROL] ⚠️  Superposition on half {half} only reached a ratio residual of {residual:.3e}")
    return project(fit.x)


def superposition_masks(
    T: TransmissionMatrix,
    target: SuperpositionTarget,
    calibrate_steps: int = DEFAULT_CALIBRATE_STEPS,
) -> Tuple[SlmPattern, SlmPattern]:
    """
    Each photon to (|x> + exp(i phi)|y>)/sqrt(2).

    The starting mask is arg(conj(T_x)/|T_x| + exp(i phi) conj(T_y)/|T_y|).
    calibrate_steps > 0 then solves for the relative weight and phase
    (Levenberg-Marquardt, at most calibrate_steps iterations) until the
    output ratio e(y)/e(x) predicted by T is exactly exp(i phi).
    """
    return (
        _superposition_half(T, "H", target.x, target.y, target.phi_h, calibrate_steps),
        _superposition_half(T, "V", target.x, target.y, target.phi_v, calibrate_steps),
    )


# --- TTM inverse operator ---
def ttm_inverse_field(T: TransmissionMatrix, x: PositionLike, y: PositionLike) -> TwoPhotonInputField:
    xi, yi = position_index(x), position_index(y)
    if xi == yi:
        raise UnsupportedConfigurationError("The inverse operator targets two distinct output positions")
    for p in (xi, yi):
        if not 0 <= p < T.n_out:
            raise RangeError(f"Output position {p} outside 0..{T.n_out - 1}")
        if not np.any(T.matrix[p] != 0):
            raise DegenerateTargetError(f"TM row {p} is zero; nothing reaches that output")

    x_h, y_h = np.conj(T.h_block[xi]), np.conj(T.h_block[yi])
    x_v, y_v = np.conj(T.v_block[xi]), np.conj(T.v_block[yi])
    matrix = np.outer(x_h, y_v) + np.outer(y_h, x_v)
    return TwoPhotonInputField(matrix=matrix, x=xi, y=yi, x_h=x_h, y_h=y_h, x_v=x_v, y_v=y_v)


def _unit(vec: ComplexVector, what: str) -> ComplexVector:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DegenerateTargetError(f"{what} has no amplitude")
    return vec / norm


def separable_solutions(B: TwoPhotonInputField, phis: Sequence[float] = (0.0,)) -> List[SeparableSolution]:
    """
    Separable factorizations of a rank-2 two-photon input field.

    The factors come straight from the rank-2 structure; an SVD of B checks
    the rank and that every solution's H part lies in B's column space.
    """
    left, sigma, _ = svd(B.matrix, full_matrices=False)
    if sigma.size > 2 and sigma[2] > RANK_TOLERANCE * sigma[0]:
        raise UnsupportedConfigurationError(
            f"Input field has rank > 2 (sigma_3/sigma_1 = {sigma[2] / sigma[0]:.3e}); only single-pair targets are supported"
        )

    solutions = [
        SeparableSolution(_unit(B.x_h, "H row x"), _unit(B.y_v, "V row y"), "asymmetric"),
        SeparableSolution(_unit(B.y_h, "H row y"), _unit(B.x_v, "V row x"), "asymmetric-swapped"),
    ]
    for phi in phis:
        u = _unit(_unit(B.x_h, "H row x") + np.exp(1j * phi) * _unit(B.y_h, "H row y"), "H superposition")
        v = _unit(_unit(B.x_v, "V row x") + np.exp(1j * phi) * _unit(B.y_v, "V row y"), "V superposition")
        solutions.append(SeparableSolution(u, v, "symmetric", float(phi)))

    rank = int(np.sum(sigma > RANK_TOLERANCE * sigma[0])) if sigma[0] > 0 else 0
    span = left[:, :rank]
    for sol in solutions:
        captured = np.linalg.norm(span.conj().T @ sol.u)
        if abs(captured - 1.0) > 1e-8:
            print(f"[CONTROL] ⚠️  {sol.family} solution leaves B's column space (captured norm {captured:.6f})")
    return solutions


# --- Phase law ---
def predicted_contrast(
    T: TransmissionMatrix,
    pattern_h: SlmPattern,
    pattern_v: SlmPattern,
    x: PositionLike,
    y: PositionLike,
    coherence: CoherenceModel,
    delta_near: float = 0.0,
    delta_far: float = 0.4,
) -> float:
    amps = pair_amplitude(T, TwoPhotonInput.from_patterns(pattern_h, pattern_v), x, y)
    return nonclassical_contrast(
        coincidence_rate(amps, coherence.mutual_coherence(delta_near)),
        coincidence_rate(amps, coherence.mutual_coherence(delta_far)),
    )


def grid_phases(n: int) -> NDArray[np.float64]:
    if n < 1:
        raise RangeError(f"Phase grid needs at least one point, got {n}")
    return 2 * np.pi * np.arange(n) / n


def phase_grid_masks(
    T: TransmissionMatrix,
    x: PositionLike,
    y: PositionLike,
    n: int = 8,
    calibrate_steps: int = DEFAULT_CALIBRATE_STEPS,
) -> Tuple[NDArray[np.float64], List[SlmPattern], List[SlmPattern]]:
    """One superposition mask per grid phase and SLM half; the halves are set independently."""
    phis = grid_phases(n)
    masks_h = [_superposition_half(T, "H", x, y, phi, calibrate_steps) for phi in phis]
    masks_v = [_superposition_half(T, "V", x, y, phi, calibrate_steps) for phi in phis]
    return phis, masks_h, masks_v


def contrast_phase_grid(
    T: TransmissionMatrix,
    x: PositionLike,
    y: PositionLike,
    coherence: CoherenceModel,
    n: int = 8,
    delta_near: float = 0.0,
    delta_far: float = 0.4,
    calibrate_steps: int = DEFAULT_CALIBRATE_STEPS,
    masks: Optional[Tuple[NDArray[np.float64], List[SlmPattern], List[SlmPattern]]] = None,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Model contrast C[i, j] at phi_H = phis[i], phi_V = phis[j]; reuses `masks` from phase_grid_masks when given."""
    phis, masks_h, masks_v = masks if masks is not None else phase_grid_masks(T, x, y, n, calibrate_steps)
    grid = np.empty((len(masks_h), len(masks_v)))
    for i, mask_h in enumerate(masks_h):
        for j, mask_v in enumerate(masks_v):
            grid[i, j] = predicted_contrast(T, mask_h, mask_v, x, y, coherence, delta_near, delta_far)
    return phis, grid


def _cosine_model(delta_phi, amplitude, phase_offset):
    return amplitude * np.cos(delta_phi + phase_offset)


def fit_cosine_law(phis_h, phis_v, contrast) -> CosineFit:
    """Fit C = A cos(phi_H - phi_V + phi_0) over a grid of phase settings."""
    ph, pv = np.meshgrid(np.asarray(phis_h, float), np.asarray(phis_v, float), indexing="ij")
    c = np.asarray(contrast, dtype=np.float64)
    if c.shape != ph.shape:
        raise DimensionError(f"Contrast grid shape {c.shape} does not match phases {ph.shape}")
    keep = np.isfinite(c)
    delta = (ph - pv)[keep]
    values = c[keep]

    # linear least squares seeds the nonlinear fit: C = p cos(d) - q sin(d)
    design = np.column_stack([np.cos(delta), -np.sin(delta)])
    (p, q), *_ = np.linalg.lstsq(design, values, rcond=None)
    (amplitude, offset), _ = curve_fit(_cosine_model, delta, values, p0=[np.hypot(p, q), np.arctan2(q, p)])
    if amplitude < 0:
        amplitude, offset = -amplitude, offset + np.pi
    fitted = _cosine_model(delta, amplitude, offset)
    correlation = float(np.corrcoef(values, fitted)[0, 1]) if np.std(values) > 0 else 0.0
    return CosineFit(amplitude=float(amplitude), phase_offset=wrap_to_pi(offset), correlation=correlation)
