"""
Virtual two-photon lab.

A hidden ground-truth fiber (a rectangular block of one Haar unitary), two
phase-only SLM halves, a delay stage, a photon-pair source, an intensity
camera and two movable fiber-coupled counters with coincidence logic.

All experiment code talks to the fiber only through the measurement methods
of LabState; true_transmission_matrix() is the oracle back door for tests.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field

from .config import debug_enabled
from .control import SlmPattern
from .errors import ConfigError, DimensionError, RangeError
from .numcore import UnitaryMatrix, as_complex_matrix, as_complex_vector, haar_unitary, make_rng, unitarity_defect
from .tmrecon import TransmissionMatrix
from .ttm import PositionLike, TwoPhotonInput, coincidence_rate, output_fields, pair_amplitude, position_index

Half = Literal["H", "V"]
ImageSelection = Literal["H", "V", "BOTH"]
Arm = Literal["F1", "F2"]

# 50:50 coupler used to characterize the source (H in port 0, V in port 1)
BALANCED_COUPLER = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=np.complex128) / np.sqrt(2.0)


# --- Parameter sets ---
class FiberConfig(BaseModel):
    """Mode counts of the simulated fiber and the seed of its ground truth."""

    n_in_h: int = Field(default=180, ge=1, description="H-polarized input modes (SLM H)")
    n_in_v: int = Field(default=190, ge=1, description="V-polarized input modes (SLM V)")
    n_out: int = Field(default=100, ge=1, description="Monitored output modes, one per camera macro-pixel")
    ambient_dim: Optional[int] = Field(default=None, ge=1, description="Size of the ambient unitary; defaults to n_in + n_out")
    grid_cols: Optional[int] = Field(default=None, ge=1, description="Columns of the output image grid")
    seed: int = Field(default=2024, ge=0, description="Seed of the ground-truth unitary")

    def model_post_init(self, __context):
        """Every input column and every output row must fit inside the ambient unitary"""
        dim = self.resolved_ambient_dim
        if self.n_in > dim or self.n_out > dim:
            raise ConfigError(
                f"ambient_dim={dim} cannot hold n_in={self.n_in} inputs and n_out={self.n_out} outputs"
            )
        if self.n_out % self.resolved_grid_cols != 0:
            raise ConfigError(f"grid_cols={self.grid_cols} does not divide n_out={self.n_out}")

    @property
    def n_in(self) -> int:
        return self.n_in_h + self.n_in_v

    @property
    def resolved_ambient_dim(self) -> int:
        return self.ambient_dim if self.ambient_dim is not None else self.n_in + self.n_out

    @property
    def resolved_grid_cols(self) -> int:
        if self.grid_cols is not None:
            return self.grid_cols
        # most square grid that tiles n_out exactly
        return max(c for c in range(1, int(np.sqrt(self.n_out)) + 1) if self.n_out % c == 0)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        cols = self.resolved_grid_cols
        return self.n_out // cols, cols


def _gaussian_coherence(source: "SourceModel", delta_mm: float) -> float:
    return source.visibility_v0 * float(np.exp(-((delta_mm / source.coherence_scale_mm) ** 2)))


COHERENCE_SHAPES: Dict[str, Callable[["SourceModel", float], float]] = {
    "gaussian": _gaussian_coherence,
}


class SourceModel(BaseModel):
    """Photon-pair source. Wavelength and filter width are metadata only."""

    wavelength_nm: float = Field(default=810.0, gt=0)
    filter_fwhm_nm: float = Field(default=1.0, gt=0)
    visibility_v0: float = Field(default=0.86, ge=0.0, le=1.0, description="Interference weight at zero delay")
    coherence_scale_mm: float = Field(default=0.2, gt=0.0, description="Gaussian width of V(delta)")
    pair_rate: float = Field(default=2e5, ge=0.0, description="Pairs per second entering the fiber")
    classical_rate: float = Field(default=1e9, gt=0.0, description="Photons per second of the classical TM source")
    shape: Literal["gaussian"] = "gaussian"

    def mutual_coherence(self, delta_mm: float) -> float:
        return COHERENCE_SHAPES[self.shape](self, float(delta_mm))


class DetectorModel(BaseModel):
    coincidence_window_s: float = Field(default=2.5e-9, gt=0.0)
    dark_rate: float = Field(default=0.0, ge=0.0, description="Dark counts per second per detector")
    efficiency: float = Field(default=1.0, ge=0.0, le=1.0)
    noise_mode: Literal["noiseless", "poisson"] = "noiseless"
    seed: int = Field(default=7, ge=0, description="Seed of the counting-noise stream")


def mutual_coherence(source: SourceModel, delta_mm: float) -> float:
    return source.mutual_coherence(delta_mm)


# --- Lab objects ---
@dataclass(frozen=True)
class OutputPosition:
    index: int
    label: str = ""
    grid: Tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class CoincidenceRecord:
    counts: float
    estimated_rate: float
    poisson_sigma: float
    duration: float


@dataclass(frozen=True)
class GroundTruthFiber:
    unitary: UnitaryMatrix
    transmission: TransmissionMatrix
    grid_shape: Tuple[int, int]

    def grid_coordinate(self, index: int) -> Tuple[int, int]:
        return divmod(index, self.grid_shape[1])


def build_ground_truth(config: FiberConfig, ambient: Union[UnitaryMatrix, np.ndarray, None] = None) -> GroundTruthFiber:
    dim = config.resolved_ambient_dim
    if ambient is None:
        unitary = haar_unitary(dim, config.seed)
    else:
        matrix = ambient.matrix if isinstance(ambient, UnitaryMatrix) else as_complex_matrix(ambient, "ambient")
        if matrix.shape != (dim, dim):
            raise DimensionError(f"Ambient unitary has shape {matrix.shape}, expected ({dim}, {dim})")
        if unitarity_defect(matrix) > 1e-10:
            raise RangeError("Ambient matrix is not unitary")
        unitary = ambient if isinstance(ambient, UnitaryMatrix) else UnitaryMatrix(matrix, config.seed)

    # output rows and input columns both start at 0; the rest of U is the
    # discarded polarization and unimaged light
    block = unitary.matrix[: config.n_out, : config.n_in]
    tm = TransmissionMatrix(matrix=block, n_in_h=config.n_in_h, provenance="oracle")
    return GroundTruthFiber(unitary=unitary, transmission=tm, grid_shape=config.grid_shape)


class LabState:
    """Single-writer stateful lab; measurements read the current SLM and delay settings."""

    def __init__(self, config: FiberConfig, source: SourceModel, detector: DetectorModel, fiber: GroundTruthFiber):
        self.config = config
        self.source = source
        self.detector = detector
        self._fiber = fiber
        self.pattern_h = SlmPattern.flat("H", config.n_in_h)
        self.pattern_v = SlmPattern.flat("V", config.n_in_v)
        self.delay_mm = 0.0
        self.rng = make_rng(detector.seed)

    # --- Controls ---
    def set_slm(self, half: Half, pattern: SlmPattern) -> None:
        if half not in ("H", "V"):
            raise RangeError(f"SLM half must be 'H' or 'V', got {half!r}")
        expected = self.config.n_in_h if half == "H" else self.config.n_in_v
        if pattern.n_modes != expected:
            raise DimensionError(f"SLM {half} has {expected} modes, pattern has {pattern.n_modes}")
        if pattern.half != half:
            pattern = SlmPattern(pattern.phases, half, pattern.zero_amplitude)
        if half == "H":
            self.pattern_h = pattern
        else:
            self.pattern_v = pattern

    def set_delay(self, delta_mm: float) -> None:
        self.delay_mm = float(delta_mm)
        if debug_enabled():
            print(f"DEBUG: [VIRTLAB] delay {self.delay_mm:+.3f} mm, V={self.visibility:.4f}")

    @property
    def visibility(self) -> float:
        return self.source.mutual_coherence(self.delay_mm)

    @property
    def noisy(self) -> bool:
        return self.detector.noise_mode == "poisson"

    # --- Positions ---
    def position(self, index: int, label: str = "") -> OutputPosition:
        if not 0 <= index < self.config.n_out:
            raise RangeError(f"Output position {index} outside 0..{self.config.n_out - 1}")
        return OutputPosition(index=index, label=label, grid=self._fiber.grid_coordinate(index))

    def position_at(self, row: int, col: int, label: str = "") -> OutputPosition:
        rows, cols = self._fiber.grid_shape
        if not (0 <= row < rows and 0 <= col < cols):
            raise RangeError(f"Grid cell ({row}, {col}) outside the {rows}x{cols} output grid")
        return self.position(row * cols + col, label)

    def _index(self, pos: PositionLike) -> int:
        idx = position_index(pos)
        if not 0 <= idx < self.config.n_out:
            raise RangeError(f"Output position {idx} outside 0..{self.config.n_out - 1}")
        return idx

    # --- Measurements ---
    def current_input(self) -> TwoPhotonInput:
        return TwoPhotonInput.from_patterns(self.pattern_h, self.pattern_v, "slm")

    def _output_fields(self) -> Tuple[np.ndarray, np.ndarray]:
        return output_fields(self._fiber.transmission, self.current_input())

    def _draw(self, mean):
        if not self.noisy:
            return mean
        return np.asarray(self.rng.poisson(mean), dtype=np.float64)

    def intensity_image(self, which: ImageSelection = "BOTH", exposure: float = 1.0) -> NDArray[np.float64]:
        """Camera image on the output grid; BOTH is the incoherent sum of the two photons."""
        if which not in ("H", "V", "BOTH"):
            raise RangeError(f"Image selection must be H, V or BOTH, got {which!r}")
        if exposure <= 0:
            raise RangeError(f"Exposure must be > 0, got {exposure}")
        e_h, e_v = self._output_fields()
        intensity = np.zeros(self.config.n_out)
        if which in ("H", "BOTH"):
            intensity = intensity + np.abs(e_h) ** 2
        if which in ("V", "BOTH"):
            intensity = intensity + np.abs(e_v) ** 2
        mean = self.source.pair_rate * exposure * self.detector.efficiency * intensity
        return self._draw(mean).reshape(self._fiber.grid_shape)

    def classical_intensity(self, field, exposure: float = 1.0, reference=None) -> NDArray[np.float64]:
        """
        |T field + reference|^2 per output pixel with the classical source.

        `field` spans all n_in input modes (H then V). The return value is in
        units of |E|^2; in poisson mode it is a count image divided by the
        expected counts per unit intensity.
        """
        if exposure <= 0:
            raise RangeError(f"Exposure must be > 0, got {exposure}")
        f = as_complex_vector(field, "field")
        if f.shape[0] != self.config.n_in:
            raise DimensionError(f"Classical field has {f.shape[0]} modes, fiber has {self.config.n_in}")
        out = self._fiber.transmission.matrix @ f
        if reference is not None:
            ref = as_complex_vector(reference, "reference")
            if ref.shape[0] != self.config.n_out:
                raise DimensionError(f"Reference field has {ref.shape[0]} pixels, camera has {self.config.n_out}")
            out = out + ref
        intensity = np.abs(out) ** 2
        if not self.noisy:
            return intensity
        scale = self.source.classical_rate * exposure * self.detector.efficiency
        if scale == 0:
            return np.zeros_like(intensity)
        return self.rng.poisson(scale * intensity) / scale

    def singles_rate(self, pos: PositionLike, arm: Arm = "F1") -> float:
        """Counts/s at one collection fiber; the arm only labels which detector is asked."""
        if arm not in ("F1", "F2"):
            raise RangeError(f"Detector arm must be F1 or F2, got {arm!r}")
        idx = self._index(pos)
        e_h, e_v = self._output_fields()
        photons = abs(e_h[idx]) ** 2 + abs(e_v[idx]) ** 2
        return float(self.source.pair_rate * self.detector.efficiency * photons + self.detector.dark_rate)

    def accidental_rate(self, x: PositionLike, y: PositionLike) -> float:
        """Uncorrelated coincidences S1 S2 tau_w; independent of the delay."""
        return self.singles_rate(x, "F1") * self.singles_rate(y, "F2") * self.detector.coincidence_window_s

    def coincidence_rate(self, x: PositionLike, y: PositionLike) -> float:
        """Correlated pairs plus accidentals, in counts/s."""
        amps = pair_amplitude(self._fiber.transmission, self.current_input(), self._index(x), self._index(y))
        correlated = self.source.pair_rate * self.detector.efficiency**2 * coincidence_rate(amps, self.visibility)
        return correlated + self.accidental_rate(x, y)

    def count_coincidences(self, x: PositionLike, y: PositionLike, duration: float) -> CoincidenceRecord:
        if duration <= 0:
            raise RangeError(f"Acquisition duration must be > 0, got {duration}")
        rate = self.coincidence_rate(x, y)
        counts = float(self._draw(rate * duration))
        return CoincidenceRecord(
            counts=counts,
            estimated_rate=counts / duration,
            poisson_sigma=float(np.sqrt(counts)),
            duration=float(duration),
        )

    def hom_scan(
        self, x: PositionLike, y: PositionLike, deltas: Sequence[float], duration: float
    ) -> List[Tuple[float, CoincidenceRecord]]:
        """Coincidences at (x, y) while stepping the delay stage; the stage is restored afterwards."""
        start = self.delay_mm
        scan = []
        try:
            for delta in deltas:
                self.set_delay(delta)
                scan.append((float(delta), self.count_coincidences(x, y, duration)))
        finally:
            self.set_delay(start)
        return scan

    def true_transmission_matrix(self) -> TransmissionMatrix:
        """Oracle copy of the ground-truth TM. Measured-only experiment paths never call this."""
        tm = self._fiber.transmission
        return TransmissionMatrix(matrix=tm.matrix.copy(), n_in_h=tm.n_in_h, provenance="oracle")


def new_lab(
    config: Optional[FiberConfig] = None,
    source: Optional[SourceModel] = None,
    detector: Optional[DetectorModel] = None,
    ambient: Union[UnitaryMatrix, np.ndarray, None] = None,
) -> LabState:
    """Build a lab with flat SLMs and zero delay. `ambient` replaces the Haar draw (e.g. an identity fiber)."""
    config = config or FiberConfig()
    source = source or SourceModel()
    detector = detector or DetectorModel()
    fiber = build_ground_truth(config, ambient)
    rows, cols = config.grid_shape
    print(
        f"[VIRTLAB] ✅ Lab ready: {config.n_in_h}+{config.n_in_v} inputs, {config.n_out} outputs "
        f"({rows}x{cols} grid), ambient {config.resolved_ambient_dim}, noise={detector.noise_mode}"
    )
    return LabState(config, source, detector, fiber)


def coupler_lab(source: Optional[SourceModel] = None, detector: Optional[DetectorModel] = None) -> LabState:
    """One H mode and one V mode on a balanced 2x2 coupler: the textbook HOM setup."""
    config = FiberConfig(n_in_h=1, n_in_v=1, n_out=2, ambient_dim=2, grid_cols=2)
    return new_lab(config, source, detector, ambient=UnitaryMatrix(BALANCED_COUPLER.copy(), seed=0))


# --- Patterns and image helpers ---
def fourier_pattern(half: Half, k: int, n_modes: int) -> SlmPattern:
    """Phase ramp theta_i = 2 pi k i / N; distinct k give orthogonal input fields."""
    if not 0 <= k < n_modes:
        raise RangeError(f"Ramp index {k} outside 0..{n_modes - 1}")
    return SlmPattern(2 * np.pi * k * np.arange(n_modes) / n_modes, half)


def speckle_grain_count(image) -> float:
    """Participation ratio (sum I)^2 / sum I^2: the effective number of independent grains."""
    arr = np.asarray(image, dtype=np.float64).ravel()
    power = float(np.sum(arr**2))
    if power == 0:
        return 0.0
    return float(np.sum(arr)) ** 2 / power


def speckle_contrast(image) -> float:
    arr = np.asarray(image, dtype=np.float64).ravel()
    mean = float(np.mean(arr))
    return float(np.std(arr) / mean) if mean > 0 else 0.0


def scan_window(center: int, width: int, grid_shape: Tuple[int, int]) -> List[int]:
    """Output indices of `width` neighbouring cells along the grid row of `center`, shifted to stay inside the row."""
    cols = grid_shape[1]
    if width > cols:
        raise RangeError(f"Scan width {width} exceeds the {cols} grid columns")
    row, col = divmod(center, cols)
    first = min(max(col - width // 2, 0), cols - width)
    return [row * cols + first + i for i in range(width)]


def scan_positions(lab: LabState, center: PositionLike, width: int = 5, prefix: str = "P") -> List[OutputPosition]:
    indices = scan_window(lab.position(position_index(center)).index, width, lab.config.grid_shape)
    return [lab.position(idx, f"{prefix}{i + 1}") for i, idx in enumerate(indices)]
