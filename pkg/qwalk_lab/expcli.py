"""
Experiment runners behind the CLI.

Each cmd_* builds one lab from an ExperimentConfig, drives it sequentially,
writes its artifacts through an ArtifactWriter and finishes with a
RunManifest listing every emitted file and its checksum.
"""

from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from . import __version__
from .artifacts import ArtifactWriter
from .config import environment_overrides, read_config_file, source_date_epoch
from .control import (
    SuperpositionTarget,
    contrast_phase_grid,
    fit_cosine_law,
    focus_independent,
    phase_grid_masks,
    superposition_masks,
)
from .errors import ConfigError
from .tmrecon import TransmissionMatrix, measure_tm, normalize_rows, save_tm, tm_fidelity
from .ttm import TwoPhotonInput, classify_hom_curve, contrast_matrix, hom_curve, nonclassical_contrast
from .virtlab import (
    DetectorModel,
    FiberConfig,
    LabState,
    SourceModel,
    coupler_lab,
    fourier_pattern,
    new_lab,
    scan_positions,
    scan_window,
    speckle_grain_count,
)

MANIFEST_NAME = "manifest.json"


def _default_deltas() -> List[float]:
    return [round(-0.6 + 0.05 * i, 3) for i in range(25)]


# --- Config ---
class ExperimentConfig(BaseModel):
    """Everything one CLI run needs. Positions left at None resolve from the output grid."""

    experiment: str = Field(default="ttm-matrix", description="Subcommand the config was written for")
    fiber: FiberConfig = Field(default_factory=FiberConfig)
    source: SourceModel = Field(default_factory=SourceModel)
    detector: DetectorModel = Field(default_factory=DetectorModel)

    # Delay stage
    delta_near: float = Field(default=0.0, description="Indistinguishable setting, mm")
    delta_far: float = Field(default=0.4, description="Distinguishable setting, mm")
    hom_deltas: List[float] = Field(default_factory=_default_deltas)

    # Acquisition
    matrix_duration: float = Field(default=900.0, gt=0, description="Seconds per point for matrix and focus runs")
    scan_duration: float = Field(default=290.0, gt=0, description="Seconds per point for phase and delay scans")
    image_exposure: float = Field(default=1.0, gt=0)

    # TM measurement
    tm_source: Literal["measured", "oracle"] = "measured"
    reference_mode: int = Field(default=0, ge=0)
    phase_steps: int = Field(default=4, ge=3)
    tm_exposure: float = Field(default=1.0, gt=0)

    # Two-photon matrix
    h_inputs: List[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    v_inputs: List[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    f1_positions: Optional[List[int]] = None
    f2_positions: Optional[List[int]] = None

    # Targeting
    target_x: Optional[int] = Field(default=None, ge=0)
    target_y: Optional[int] = Field(default=None, ge=0)
    scan_width: int = Field(default=5, ge=1)
    grid_size: int = Field(default=8, ge=2)
    calibrate_steps: int = Field(default=20, ge=0)

    output_dir: str = "runs"

    def model_post_init(self, __context):
        """Cross-checks against the fiber geometry"""
        n_out = self.fiber.n_out
        x, y = self.resolved_targets()
        for name, pos in (("target_x", x), ("target_y", y)):
            if not 0 <= pos < n_out:
                raise ConfigError(f"{name}={pos} outside 0..{n_out - 1}")
        if x == y:
            raise ConfigError(f"target_x and target_y must differ (both {x})")
        for name, positions in (("f1_positions", self.resolved_f1()), ("f2_positions", self.resolved_f2())):
            for pos in positions:
                if not 0 <= pos < n_out:
                    raise ConfigError(f"{name} entry {pos} outside 0..{n_out - 1}")
        for name, modes, limit in (("h_inputs", self.h_inputs, self.fiber.n_in_h), ("v_inputs", self.v_inputs, self.fiber.n_in_v)):
            if not modes:
                raise ConfigError(f"{name} must name at least one input pattern")
            for k in modes:
                if not 0 <= k < limit:
                    raise ConfigError(f"{name} entry {k} outside 0..{limit - 1}")
        if self.reference_mode >= self.fiber.n_in:
            raise ConfigError(f"reference_mode={self.reference_mode} is not an input mode (n_in={self.fiber.n_in})")
        if self.scan_width > self.fiber.grid_shape[1]:
            raise ConfigError(f"scan_width={self.scan_width} exceeds the {self.fiber.grid_shape[1]} grid columns")
        shared = set(scan_window(x, self.scan_width, self.fiber.grid_shape)) & set(
            scan_window(y, self.scan_width, self.fiber.grid_shape)
        )
        if shared:
            raise ConfigError(f"Focus scan windows around target_x={x} and target_y={y} share outputs {sorted(shared)}")
        if not self.hom_deltas:
            raise ConfigError("hom_deltas must hold at least one delay")

    def _anchor(self, quarter: int) -> Tuple[int, int]:
        rows, cols = self.fiber.grid_shape
        return (quarter * rows) // 4, (quarter * cols) // 4

    def resolved_targets(self) -> Tuple[int, int]:
        cols = self.fiber.grid_shape[1]
        (rx, cx), (ry, cy) = self._anchor(1), self._anchor(3)
        x = self.target_x if self.target_x is not None else rx * cols + cx
        y = self.target_y if self.target_y is not None else ry * cols + cy
        return x, y

    def _pair_near(self, center: int) -> List[int]:
        cols = self.fiber.grid_shape[1]
        row, col = divmod(center, cols)
        second = col + 2 if col + 2 < cols else max(col - 2, 0)
        return [center, row * cols + second]

    def resolved_f1(self) -> List[int]:
        return self.f1_positions if self.f1_positions is not None else self._pair_near(self.resolved_targets()[0])

    def resolved_f2(self) -> List[int]:
        return self.f2_positions if self.f2_positions is not None else self._pair_near(self.resolved_targets()[1])


LIST_KEYS = {"h_inputs": int, "v_inputs": int, "f1_positions": int, "f2_positions": int, "hom_deltas": float}
NOISE_FLAGS = {"off": "noiseless", "noiseless": "noiseless", "poisson": "poisson"}
_NESTED = ("fiber", "source", "detector")


def _parse_list(key: str, raw: str, kind) -> list:
    try:
        return [kind(item) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigError(f"'{key}' must be a comma-separated list of {kind.__name__} values, got {raw!r}") from e


def config_from_values(values: Dict[str, str]) -> ExperimentConfig:
    """Route flat `key = value` settings into the nested parameter sets."""
    fiber: Dict[str, Any] = {}
    source: Dict[str, Any] = {}
    detector: Dict[str, Any] = {}
    experiment: Dict[str, Any] = {}
    for key, raw in values.items():
        key = key.lower()
        if key == "seed":
            fiber["seed"] = raw
        elif key == "noise_seed":
            detector["seed"] = raw
        elif key in ("noise", "noise_mode"):
            if raw.lower() not in NOISE_FLAGS:
                raise ConfigError(f"noise must be one of off|poisson, got {raw!r}")
            detector["noise_mode"] = NOISE_FLAGS[raw.lower()]
        elif key in LIST_KEYS:
            experiment[key] = _parse_list(key, raw, LIST_KEYS[key])
        elif key in FiberConfig.model_fields:
            fiber[key] = raw
        elif key in SourceModel.model_fields:
            source[key] = raw
        elif key in DetectorModel.model_fields:
            detector[key] = raw
        elif key in ExperimentConfig.model_fields and key not in _NESTED:
            experiment[key] = raw
        else:
            raise ConfigError(f"Unknown config key '{key}'")
    return ExperimentConfig(
        fiber=FiberConfig(**fiber),
        source=SourceModel(**source),
        detector=DetectorModel(**detector),
        **experiment,
    )


def load_experiment_config(
    path: Optional[str] = None,
    cli_overrides: Optional[Dict[str, str]] = None,
    environ: Optional[Dict[str, str]] = None,
) -> ExperimentConfig:
    """Defaults < config file < QWALK_* environment < CLI flags."""
    values: Dict[str, str] = {}
    if path:
        values.update(read_config_file(path))
    values.update(environment_overrides(environ))
    values.update({k: v for k, v in (cli_overrides or {}).items() if v is not None})
    return config_from_values(values)


# --- Manifest ---
class ManifestFile(BaseModel):
    name: str
    sha256: str
    bytes: int


class RunManifest(BaseModel):
    command: str
    version: str
    created: str
    seeds: Dict[str, int]
    config: Dict[str, Any]
    files: List[ManifestFile]


def _timestamp() -> str:
    epoch = source_date_epoch()
    moment = datetime.fromtimestamp(epoch, tz=timezone.utc) if epoch is not None else datetime.now(timezone.utc)
    return moment.replace(microsecond=0).isoformat()


def write_manifest(writer: ArtifactWriter, command: str, config: ExperimentConfig) -> RunManifest:
    manifest = RunManifest(
        command=command,
        version=__version__,
        created=_timestamp(),
        seeds={"fiber": config.fiber.seed, "detector": config.detector.seed},
        config=config.model_dump(mode="json"),
        files=[ManifestFile(**entry) for entry in writer.entries()],
    )
    writer.json(MANIFEST_NAME, manifest.model_dump(mode="json"), record=False)
    print(f"[EXPCLI] ✅ {command}: {len(manifest.files)} files written to {writer.out_dir}")
    return manifest


# --- Shared plumbing ---
def build_lab(config: ExperimentConfig) -> LabState:
    return new_lab(config.fiber, config.source, config.detector)


def acquire_tm(lab: LabState, config: ExperimentConfig) -> TransmissionMatrix:
    """The TM the inverse design works from: measured through the camera unless the oracle is requested."""
    if config.tm_source == "oracle":
        print("[EXPCLI] ⚠️  Using the oracle TM; results do not reflect a measured-only workflow")
        return lab.true_transmission_matrix()
    measured = measure_tm(
        lab,
        reference_mode=config.reference_mode,
        phase_steps=config.phase_steps,
        exposure=config.tm_exposure,
    )
    return normalize_rows(measured.tm)


def _write_images(writer: ArtifactWriter, lab: LabState, prefix: str, exposure: float) -> Dict[str, float]:
    grains = {}
    for which in ("H", "V", "BOTH"):
        image = lab.intensity_image(which, exposure)
        writer.pgm(f"{prefix}_{which}", image)
        grains[which] = speckle_grain_count(image)
    return grains


def _contrast_or_nan(near: float, far: float) -> float:
    return (near - far) / far if far > 0 else float("nan")


def _counts_sigma(near: float, far: float) -> float:
    if far <= 0 or near <= 0:
        return float("nan")
    return (near / far) * float(np.sqrt(1.0 / near + 1.0 / far))


# --- Commands ---
def cmd_measure_tm(config: ExperimentConfig) -> Dict[str, Any]:
    writer = ArtifactWriter(config.output_dir)
    lab = build_lab(config)
    reconstructed = measure_tm(
        lab,
        reference_mode=config.reference_mode,
        phase_steps=config.phase_steps,
        exposure=config.tm_exposure,
    )
    fidelity = tm_fidelity(reconstructed, lab.true_transmission_matrix())
    writer.record(save_tm(reconstructed.tm, writer.path("tm.qwtm")))
    report = {
        "fidelity": fidelity,
        "unreliable_rows": int(np.sum(reconstructed.unreliable_rows)),
        "phase_steps": config.phase_steps,
        "reference_mode": config.reference_mode,
        "shape": list(reconstructed.tm.matrix.shape),
        "noise_mode": config.detector.noise_mode,
    }
    writer.json("tm_report.json", report)
    print(f"[EXPCLI] TM fidelity vs. ground truth: {fidelity:.6f}")
    write_manifest(writer, "measure-tm", config)
    return report


def _output_pairs(config: ExperimentConfig) -> List[Tuple[str, int, int]]:
    f1, f2 = config.resolved_f1(), config.resolved_f2()
    if len(f1) != 2 or len(f2) != 2:
        raise ConfigError("ttm-matrix needs exactly two F1 and two F2 positions")
    (x1, x2), (y1, y2) = f1, f2
    pairs = [("X1Y2", x1, y2), ("X1Y1", x1, y1), ("X2Y2", x2, y2), ("X2Y1", x2, y1)]
    for label, x, y in pairs:
        if x == y:
            raise ConfigError(f"Pair {label} collects both photons at output {x}")
    return pairs


def cmd_ttm_matrix(config: ExperimentConfig) -> Dict[str, Any]:
    """Coincidence matrix (inputs x output pairs) at both delays plus its contrast."""
    writer = ArtifactWriter(config.output_dir)
    lab = build_lab(config)
    pairs = _output_pairs(config)
    positions = [(label, lab.position(x, label[:2]), lab.position(y, label[2:])) for label, x, y in pairs]

    labels: List[str] = []
    counts = {"near": [], "far": []}
    for i in config.h_inputs:
        lab.set_slm("H", fourier_pattern("H", i, config.fiber.n_in_h))
        for j in config.v_inputs:
            lab.set_slm("V", fourier_pattern("V", j, config.fiber.n_in_v))
            labels.append(f"H{i}V{j}")
            for key, delta in (("near", config.delta_near), ("far", config.delta_far)):
                lab.set_delay(delta)
                counts[key].append(
                    [lab.count_coincidences(x, y, config.matrix_duration).counts for _, x, y in positions]
                )
    lab.set_delay(config.delta_near)

    near, far = np.array(counts["near"]), np.array(counts["far"])
    contrast = contrast_matrix(near, far, near, far, config.delta_near, config.delta_far)
    header = ["input"] + [label for label, _, _ in pairs]
    writer.csv("coincidences_near.csv", header, ([lbl] + list(row) for lbl, row in zip(labels, near)))
    writer.csv("coincidences_far.csv", header, ([lbl] + list(row) for lbl, row in zip(labels, far)))
    rows = []
    for r, lbl in enumerate(labels):
        for c, (pair_label, _, _) in enumerate(pairs):
            rows.append([lbl, pair_label, contrast.values[r, c], contrast.sigma[r, c], int(contrast.undefined[r, c])])
    writer.csv("contrast.csv", ["input", "pair", "contrast", "sigma", "undefined"], rows)

    lab.set_slm("H", fourier_pattern("H", config.h_inputs[0], config.fiber.n_in_h))
    lab.set_slm("V", fourier_pattern("V", config.v_inputs[0], config.fiber.n_in_v))
    grains = _write_images(writer, lab, "speckle", config.image_exposure)

    defined = contrast.values[~contrast.undefined]
    summary = {
        "shape": list(near.shape),
        "max_abs_contrast": float(np.max(np.abs(defined))) if defined.size else None,
        "undefined_entries": int(np.sum(contrast.undefined)),
        "speckle_grains": grains,
    }
    if summary["undefined_entries"]:
        print(f"[EXPCLI] ⚠️  {summary['undefined_entries']} contrast entries undefined (zero distinguishable counts)")
    writer.json("summary.json", summary)
    write_manifest(writer, "ttm-matrix", config)
    return summary


def cmd_focus(config: ExperimentConfig) -> Dict[str, Any]:
    """Both focusing configurations, scanned over width x width detector positions."""
    writer = ArtifactWriter(config.output_dir)
    lab = build_lab(config)
    tm = acquire_tm(lab, config)
    x_idx, y_idx = config.resolved_targets()
    x, y = lab.position(x_idx, "X"), lab.position(y_idx, "Y")
    scan_x = scan_positions(lab, x, config.scan_width, "X")
    scan_y = scan_positions(lab, y, config.scan_width, "Y")
    ix = [p.index for p in scan_x].index(x.index)
    iy = [p.index for p in scan_y].index(y.index)

    baseline = float(np.mean(lab.intensity_image("H", config.image_exposure)))
    setups = {
        "independent": focus_independent(tm, x, y),
        "superposition": superposition_masks(tm, SuperpositionTarget(x, y, 0.0, 0.0), config.calibrate_steps),
    }
    summary: Dict[str, Any] = {"target": [x.index, y.index]}
    for name, (mask_h, mask_v) in setups.items():
        lab.set_slm("H", mask_h)
        lab.set_slm("V", mask_v)
        writer.csv(
            f"mask_{name}.csv",
            ["half", "mode", "phase", "zero_amplitude"],
            (
                [mask.half, k, phase, int(mask.zero_amplitude is not None and mask.zero_amplitude[k])]
                for mask in (mask_h, mask_v)
                for k, phase in enumerate(mask.phases)
            ),
        )
        maps = {}
        singles = {}
        for key, delta in (("near", config.delta_near), ("far", config.delta_far)):
            lab.set_delay(delta)
            maps[key] = np.array(
                [[lab.count_coincidences(px, py, config.matrix_duration).counts for py in scan_y] for px in scan_x]
            )
            singles[key] = [lab.singles_rate(x, "F1"), lab.singles_rate(y, "F2")]
            writer.csv(
                f"focus_{name}_{key}.csv",
                ["f1"] + [p.label for p in scan_y],
                ([px.label] + list(row) for px, row in zip(scan_x, maps[key])),
            )
        lab.set_delay(config.delta_near)
        _write_images(writer, lab, f"focus_{name}", config.image_exposure)

        near = maps["near"]
        background = np.delete(near.ravel(), ix * len(scan_y) + iy)
        target_near, target_far = near[ix, iy], maps["far"][ix, iy]
        image_h = lab.intensity_image("H", config.image_exposure).ravel()
        summary[name] = {
            "target_counts_near": target_near,
            "target_counts_far": target_far,
            "enhancement": float(target_near / np.mean(background)) if np.mean(background) > 0 else None,
            "contrast": _contrast_or_nan(target_near, target_far),
            "contrast_sigma": _counts_sigma(target_near, target_far),
            "singles_near": singles["near"],
            "singles_far": singles["far"],
            "intensity_enhancement_h": float(image_h[x.index] / baseline) if baseline > 0 else None,
        }
        print(f"[EXPCLI] {name}: enhancement {summary[name]['enhancement']}, contrast {summary[name]['contrast']:.4f}")
    writer.json("summary.json", summary)
    write_manifest(writer, "focus", config)
    return summary


def cmd_phase_grid(config: ExperimentConfig) -> Dict[str, Any]:
    """Contrast over an n x n grid of superposition phases, with the cosine-law fit."""
    writer = ArtifactWriter(config.output_dir)
    lab = build_lab(config)
    tm = acquire_tm(lab, config)
    x_idx, y_idx = config.resolved_targets()
    x, y = lab.position(x_idx, "X"), lab.position(y_idx, "Y")
    masks = phase_grid_masks(tm, x, y, config.grid_size, config.calibrate_steps)
    phis, masks_h, masks_v = masks
    _, model = contrast_phase_grid(
        tm, x, y, config.source, delta_near=config.delta_near, delta_far=config.delta_far, masks=masks
    )

    measured = np.empty((config.grid_size, config.grid_size))
    rows = []
    for i, mask_h in enumerate(masks_h):
        lab.set_slm("H", mask_h)
        for j, mask_v in enumerate(masks_v):
            lab.set_slm("V", mask_v)
            lab.set_delay(config.delta_near)
            near = lab.count_coincidences(x, y, config.scan_duration).counts
            lab.set_delay(config.delta_far)
            far = lab.count_coincidences(x, y, config.scan_duration).counts
            measured[i, j] = _contrast_or_nan(near, far)
            rows.append([phis[i], phis[j], near, far, measured[i, j], _counts_sigma(near, far), model[i, j]])
    lab.set_delay(config.delta_near)
    writer.csv(
        "phase_grid.csv",
        ["phi_h", "phi_v", "counts_near", "counts_far", "contrast", "sigma", "model_contrast"],
        rows,
    )

    fit = fit_cosine_law(phis, phis, measured)
    summary = {
        "amplitude": fit.amplitude,
        "phase_offset": fit.phase_offset,
        "correlation": fit.correlation,
        "visibility_v0": config.source.visibility_v0,
        "grid_size": config.grid_size,
    }
    print(f"[EXPCLI] Cosine fit: A={fit.amplitude:.4f}, phi0={fit.phase_offset:+.4f} rad, r={fit.correlation:.4f}")
    writer.json("summary.json", summary)
    write_manifest(writer, "phase-grid", config)
    return summary


HOM_SETTINGS: Sequence[Tuple[str, float, float]] = (
    ("phase_0_0", 0.0, 0.0),
    ("phase_0_pi2", 0.0, np.pi / 2),
    ("phase_0_pi", 0.0, np.pi),
)


def cmd_hom_scan(config: ExperimentConfig) -> Dict[str, Any]:
    """Delay scans at three superposition phase settings."""
    writer = ArtifactWriter(config.output_dir)
    lab = build_lab(config)
    tm = acquire_tm(lab, config)
    x_idx, y_idx = config.resolved_targets()
    x, y = lab.position(x_idx, "X"), lab.position(y_idx, "Y")

    summary: Dict[str, Any] = {}
    for name, phi_h, phi_v in HOM_SETTINGS:
        mask_h, mask_v = superposition_masks(tm, SuperpositionTarget(x, y, phi_h, phi_v), config.calibrate_steps)
        lab.set_slm("H", mask_h)
        lab.set_slm("V", mask_v)
        scan = lab.hom_scan(x, y, config.hom_deltas, config.scan_duration)
        writer.csv(
            f"hom_{name}.csv",
            ["delta_mm", "counts", "sigma", "rate"],
            ([d, rec.counts, rec.poisson_sigma, rec.estimated_rate] for d, rec in scan),
        )
        model = hom_curve(tm, TwoPhotonInput.from_patterns(mask_h, mask_v), x, y, config.hom_deltas, config.source)
        counts = [rec.counts for _, rec in scan]
        summary[name] = {
            "phi_h": phi_h,
            "phi_v": phi_v,
            "shape": classify_hom_curve([(d, rec.counts) for d, rec in scan]),
            "model_shape": classify_hom_curve(model),
            "relative_spread": float((max(counts) - min(counts)) / np.mean(counts)) if np.mean(counts) > 0 else None,
        }
        print(f"[EXPCLI] {name}: {summary[name]['shape']} (model: {summary[name]['model_shape']})")
    writer.json("summary.json", summary)
    write_manifest(writer, "hom-scan", config)
    return summary


def cmd_hom_source(config: ExperimentConfig) -> Dict[str, Any]:
    """Source check: HOM dip of the pair source on a balanced 2x2 coupler."""
    writer = ArtifactWriter(config.output_dir)
    lab = coupler_lab(config.source, config.detector)
    scan = lab.hom_scan(0, 1, config.hom_deltas, config.scan_duration)
    writer.csv(
        "hom_source.csv",
        ["delta_mm", "counts", "sigma", "rate"],
        ([d, rec.counts, rec.poisson_sigma, rec.estimated_rate] for d, rec in scan),
    )
    ordered = sorted(scan, key=lambda point: abs(point[0]))
    far_delta = abs(ordered[-1][0])
    r_zero = ordered[0][1].counts
    r_far = float(np.mean([rec.counts for d, rec in scan if abs(d) == far_delta]))
    # accidentals do not depend on the delay; take their floor off both ends
    floor = lab.accidental_rate(0, 1) * config.scan_duration
    summary = {
        "visibility": -nonclassical_contrast(r_zero - floor, r_far - floor) if r_far > floor else None,
        "raw_visibility": -nonclassical_contrast(r_zero, r_far) if r_far > 0 else None,
        "accidental_counts": floor,
        "visibility_v0": config.source.visibility_v0,
        "shape": classify_hom_curve([(d, rec.counts) for d, rec in scan]),
    }
    print(f"[EXPCLI] Source HOM visibility {summary['visibility']} (configured V0 {config.source.visibility_v0})")
    writer.json("summary.json", summary)
    write_manifest(writer, "hom-source", config)
    return summary


COMMANDS = {
    "measure-tm": cmd_measure_tm,
    "ttm-matrix": cmd_ttm_matrix,
    "focus": cmd_focus,
    "phase-grid": cmd_phase_grid,
    "hom-scan": cmd_hom_scan,
    "hom-source": cmd_hom_source,
}
