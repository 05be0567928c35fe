"""
Transmission-matrix measurement by phase-stepping holography.

The lab only ever hands out intensities. Each probed input mode is
interfered with a reference at K equally spaced phase offsets and the
complex field is demodulated from the K camera frames. With an internal
(co-propagating) reference the result is the true TM multiplied by an
unknown complex factor per output row; tm_fidelity is insensitive to it.

Also holds the QWTM binary codec shared with the CLI.
"""

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Literal, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .config import debug_enabled
from .errors import ArtifactError, ConfigError, DimensionError, InsufficientStepsError, RangeError
from .numcore import ComplexMatrix, as_complex_matrix

if TYPE_CHECKING:
    from .virtlab import LabState

Basis = Literal["input-mode", "slm-macropixel"]
Provenance = Literal["oracle", "measured"]
Half = Literal["H", "V"]

DEFAULT_PHASE_STEPS = 4


# --- Types ---
@dataclass(frozen=True)
class TransmissionMatrix:
    """
    Complex n_out x n_in matrix; columns [0, n_in_h) belong to SLM H and the
    rest to SLM V. `probed` marks columns that carry information (a column
    sacrificed as internal reference is all zeros and unprobed).
    """

    matrix: ComplexMatrix
    n_in_h: int
    basis: Basis = "input-mode"
    provenance: Provenance = "oracle"
    row_ambiguity: Optional[bool] = None
    probed: Optional[NDArray[np.bool_]] = field(default=None, compare=False)

    def __post_init__(self):
        matrix = np.array(as_complex_matrix(self.matrix, "transmission matrix"), copy=True)
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        if not 0 < self.n_in_h < matrix.shape[1]:
            raise DimensionError(
                f"n_in_h must split the {matrix.shape[1]} input columns into two non-empty blocks, got {self.n_in_h}"
            )
        if self.row_ambiguity is None:
            object.__setattr__(self, "row_ambiguity", self.provenance == "measured")
        probed = np.ones(matrix.shape[1], dtype=bool) if self.probed is None else np.array(self.probed, dtype=bool)
        if probed.shape != (matrix.shape[1],):
            raise DimensionError(f"probed mask has shape {probed.shape}, expected ({matrix.shape[1]},)")
        probed.setflags(write=False)
        object.__setattr__(self, "probed", probed)

    @property
    def n_out(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_in_v(self) -> int:
        return self.n_in - self.n_in_h

    @property
    def h_block(self) -> ComplexMatrix:
        return self.matrix[:, : self.n_in_h]

    @property
    def v_block(self) -> ComplexMatrix:
        return self.matrix[:, self.n_in_h :]

    def block(self, half: Half) -> ComplexMatrix:
        if half == "H":
            return self.h_block
        if half == "V":
            return self.v_block
        raise RangeError(f"SLM half must be 'H' or 'V', got {half!r}")

    def half_size(self, half: Half) -> int:
        return self.n_in_h if half == "H" else self.n_in_v

    def masked(self, probed) -> "TransmissionMatrix":
        """Copy with the columns outside `probed` set to zero."""
        mask = np.asarray(probed, dtype=bool)
        if mask.shape != (self.n_in,):
            raise DimensionError(f"probed mask has shape {mask.shape}, expected ({self.n_in},)")
        return replace(self, matrix=self.matrix * mask[None, :], probed=mask)


@dataclass(frozen=True)
class ReconstructedTM:
    tm: TransmissionMatrix
    reference_amplitude: NDArray[np.float64]
    phase_steps: int
    reference_mode: Optional[int]
    unreliable_rows: NDArray[np.bool_]

    @property
    def reliable_rows(self) -> NDArray[np.bool_]:
        return ~self.unreliable_rows


# --- Demodulation kernel ---
def step_phases(phase_steps: int) -> NDArray[np.float64]:
    if phase_steps < 3:
        raise InsufficientStepsError(f"Phase stepping needs at least 3 steps, got {phase_steps}")
    return 2 * np.pi * np.arange(phase_steps) / phase_steps


def demodulate(intensities) -> Union[complex, NDArray[np.complex128]]:
    """
    Recover E * conj(R) from frames I_k = |E + exp(i theta_k) R|^2 taken at
    theta_k = 2 pi k / K. Axis 0 runs over the K steps; exact for K >= 3.
    """
    frames = np.asarray(intensities, dtype=np.float64)
    steps = step_phases(frames.shape[0])
    carrier = np.exp(1j * steps).reshape((-1,) + (1,) * (frames.ndim - 1))
    result = np.sum(frames * carrier, axis=0) / frames.shape[0]
    return complex(result) if np.ndim(result) == 0 else result


# --- Measurement ---
def measure_tm(
    lab: "LabState",
    reference_mode: Optional[int] = 0,
    phase_steps: int = DEFAULT_PHASE_STEPS,
    exposure: float = 1.0,
    input_modes: Optional[Sequence[int]] = None,
    unreliable_threshold: float = 1e-3,
) -> ReconstructedTM:
    """
    Phase-stepping TM measurement through the lab's classical camera path.

    reference_mode=None switches to an ideal external reference arm with an
    output field of exactly 1 on every pixel, so the recovered matrix is the
    true TM with no row ambiguity left (handy for unit tests).
    """
    steps = step_phases(phase_steps)
    n_in = lab.config.n_in
    n_out = lab.config.n_out

    if reference_mode is not None and not 0 <= reference_mode < n_in:
        raise ConfigError(f"reference_mode {reference_mode} is not an input mode (n_in={n_in})")

    if input_modes is None:
        driven = [i for i in range(n_in) if i != reference_mode]
    else:
        driven = list(input_modes)
        if reference_mode is not None and reference_mode in driven:
            raise ConfigError(f"reference mode {reference_mode} cannot also be probed")
        for i in driven:
            if not 0 <= i < n_in:
                raise ConfigError(f"input mode {i} is not an input mode (n_in={n_in})")

    mode = "external reference" if reference_mode is None else f"internal reference mode {reference_mode}"
    print(f"[TMRECON] Measuring TM: {len(driven)} input modes x {phase_steps} phase steps, {mode}")

    recovered = np.zeros((n_out, n_in), dtype=np.complex128)
    probed = np.zeros(n_in, dtype=bool)
    frames = np.empty((phase_steps, n_out), dtype=np.float64)

    if reference_mode is None:
        ones = np.ones(n_out, dtype=np.complex128)
        for i in driven:
            drive = np.zeros(n_in, dtype=np.complex128)
            drive[i] = 1.0
            for k, theta in enumerate(steps):
                frames[k] = lab.classical_intensity(drive, exposure, reference=np.exp(1j * theta) * ones)
            recovered[:, i] = demodulate(frames)
            probed[i] = True
        reference_amplitude = np.ones(n_out)
    else:
        ref = np.zeros(n_in, dtype=np.complex128)
        ref[reference_mode] = 1.0
        reference_amplitude = np.sqrt(np.maximum(lab.classical_intensity(ref, exposure), 0.0))
        for i in driven:
            for k, theta in enumerate(steps):
                field_in = ref * np.exp(1j * theta)
                field_in[i] = 1.0
                frames[k] = lab.classical_intensity(field_in / np.sqrt(2.0), exposure)
            # the 1/sqrt(2) split halves both fields, hence the factor 2
            recovered[:, i] = 2.0 * demodulate(frames)
            probed[i] = True
            if debug_enabled():
                print(f"DEBUG: [TMRECON] input {i} done, |col|={np.linalg.norm(recovered[:, i]):.4g}")

    ref_power = reference_amplitude**2
    floor = unreliable_threshold * float(np.mean(ref_power)) if np.any(ref_power > 0) else np.inf
    unreliable = ref_power < floor
    if np.any(unreliable):
        print(f"[TMRECON] ⚠️  {int(np.sum(unreliable))} output rows have a near-zero reference and are flagged unreliable")

    tm = TransmissionMatrix(
        matrix=recovered,
        n_in_h=lab.config.n_in_h,
        provenance="measured",
        row_ambiguity=reference_mode is not None,
        probed=probed,
    )
    print("[TMRECON] ✅ TM measurement finished")
    return ReconstructedTM(
        tm=tm,
        reference_amplitude=reference_amplitude,
        phase_steps=phase_steps,
        reference_mode=reference_mode,
        unreliable_rows=unreliable,
    )


# --- Validation and calibration ---
def tm_fidelity(measured: Union[ReconstructedTM, TransmissionMatrix], truth: TransmissionMatrix) -> float:
    """Mean normalized row overlap on the probed columns; blind to per-row complex factors."""
    if isinstance(measured, ReconstructedTM):
        tm, rows = measured.tm, measured.reliable_rows
    else:
        tm, rows = measured, np.ones(measured.n_out, dtype=bool)
    if tm.matrix.shape != truth.matrix.shape:
        raise DimensionError(f"Shape mismatch: measured {tm.matrix.shape} vs truth {truth.matrix.shape}")

    cols = tm.probed & truth.probed
    m = tm.matrix[:, cols]
    t = truth.matrix[:, cols]
    norms = np.linalg.norm(m, axis=1) * np.linalg.norm(t, axis=1)
    usable = rows & (norms > 0)
    if not np.any(usable):
        raise DimensionError("No usable rows to compare")
    overlaps = np.abs(np.sum(m.conj() * t, axis=1))[usable] / norms[usable]
    return float(np.clip(np.mean(overlaps), 0.0, 1.0))


def normalize_rows(tm: TransmissionMatrix) -> TransmissionMatrix:
    """Unit-norm rows; removes the magnitude part of the row ambiguity."""
    norms = np.linalg.norm(tm.matrix, axis=1, keepdims=True)
    scaled = np.divide(tm.matrix, norms, out=np.zeros_like(tm.matrix), where=norms > 0)
    return replace(tm, matrix=scaled)


def change_basis(
    tm: TransmissionMatrix,
    B,
    basis: Basis = "slm-macropixel",
    n_in_h: Optional[int] = None,
) -> TransmissionMatrix:
    """T @ B, where B maps the new basis onto the input-mode basis."""
    b = as_complex_matrix(B, "basis change matrix")
    if b.shape[0] != tm.n_in:
        raise DimensionError(f"Basis change has {b.shape[0]} rows but the TM has {tm.n_in} input columns")
    if n_in_h is None:
        if b.shape[1] != tm.n_in:
            raise DimensionError("A non-square basis change needs an explicit n_in_h for the new basis")
        n_in_h = tm.n_in_h
    # a new column is only known if every input mode it draws on was probed
    probed = np.all(tm.probed[:, None] | (b == 0), axis=0)
    return TransmissionMatrix(
        matrix=tm.matrix @ b,
        n_in_h=n_in_h,
        basis=basis,
        provenance=tm.provenance,
        row_ambiguity=tm.row_ambiguity,
        probed=probed,
    )


# --- QWTM codec ---
QWTM_MAGIC = b"QWTM"
QWTM_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB7x")
_PROVENANCE_CODES = {"oracle": 0, "measured": 1}


def save_tm(tm: TransmissionMatrix, path: Union[str, Path]) -> Path:
    target = Path(path)
    header = _HEADER.pack(QWTM_MAGIC, QWTM_VERSION, tm.n_out, tm.n_in, tm.n_in_h, _PROVENANCE_CODES[tm.provenance])
    body = np.ascontiguousarray(tm.matrix, dtype="<c16").tobytes()
    try:
        target.write_bytes(header + body)
    except OSError as e:
        raise ArtifactError(f"Could not write QWTM file {target}: {e}") from e
    return target


def load_tm(path: Union[str, Path]) -> TransmissionMatrix:
    source = Path(path)
    try:
        data = source.read_bytes()
    except OSError as e:
        raise ArtifactError(f"Could not read QWTM file {source}: {e}") from e
    if len(data) < _HEADER.size:
        raise ArtifactError(f"{source} is too short to be a QWTM file")
    magic, version, rows, cols, n_in_h, provenance_code = _HEADER.unpack_from(data)
    if magic != QWTM_MAGIC:
        raise ArtifactError(f"{source} has magic {magic!r}, expected {QWTM_MAGIC!r}")
    if version != QWTM_VERSION:
        raise ArtifactError(f"{source} has QWTM version {version}, only {QWTM_VERSION} is supported")
    expected = _HEADER.size + rows * cols * 16
    if len(data) != expected:
        raise ArtifactError(f"{source} holds {len(data)} bytes, expected {expected} for a {rows}x{cols} matrix")
    provenance = {code: name for name, code in _PROVENANCE_CODES.items()}.get(provenance_code)
    if provenance is None:
        raise ArtifactError(f"{source} has unknown provenance code {provenance_code}")

    matrix = np.frombuffer(data, dtype="<c16", offset=_HEADER.size).reshape(rows, cols).astype(np.complex128)
    probed = None
    if provenance == "measured":
        probed = np.any(matrix != 0, axis=0)
    return TransmissionMatrix(matrix=matrix, n_in_h=n_in_h, provenance=provenance, probed=probed)
