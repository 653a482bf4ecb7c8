"""Three-phase test-and-evaluation pipeline over the radar digital twin.

Phase 1 (baseline): build a seeded Monte Carlo dataset, train the
localizer with k-fold cross-validation, evaluate every algorithm, stream
per-sample successes through the convergence monitor, and gate on the
lower confidence bound of the success proportion.

Phase 2 (excursion): scale the dataset per the count/diversity rules
(new count = kappa1 * old count exactly; measured diversity must reach
kappa2 * baseline diversity or the build fails loudly), evaluate the
baseline models on the perturbed data, then re-design (array doubling),
regenerate, retrain, and re-gate with and without the perturbation.

Phase 3 (black swan): stream generated / anomaly-injected maps past the
deployed model and flag samples whose localization error exceeds a
threshold; every event carries the seeds needed to regenerate the
identical map.  Phase 3 never gates.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import io as rtio
from .errors import (
    ConfigurationError,
    PhaseOrderError,
    UnsatisfiableDiversityError,
)
from .localize import (
    ArgMaxLocalizer,
    CfarDetector,
    CnnLocalizer,
    cross_validate,
)
from .metrics import (
    ConvergenceState,
    MetricReport,
    compute_report,
    convergence_update,
    success_gate,
)
from .rfsim import (
    RadarConfig,
    TargetSpec,
    load_rd_map,
    save_rd_map,
    simulate_rd_map,
)
from .scene import PlatformState, TerrainScene, TerrainSpec, generate_terrain, patch_geometry


# ---------------------------------------------------------------------------
# Scenario space
# ---------------------------------------------------------------------------

PARAMETER_NAMES = ("lat", "lon", "speed", "heading", "look_jitter")


@dataclass(frozen=True)
class ScenarioSpace:
    """Sampling ranges for one Monte Carlo scenario draw.

    Every sample is derived from a fixed unit vector u in [0, 1]^5 so a
    range expansion rescales existing draws instead of redrawing them
    (diversity then grows monotonically with the expansion factor).
    """

    lat_range: tuple = (32.5439, 32.5571)
    lon_range: tuple = (-117.0693, -117.0293)
    speeds: tuple = (7.0, 14.0)
    heading_range: tuple = (0.0, 360.0)
    look_jitter: float = math.radians(1.0)  # rad, +/- around the target bearing
    rcs: float = 60.0  # m^2, fixed per dataset

    def validate(self):
        # degenerate (point) ranges are legal: every sample then shares that
        # coordinate and it contributes zero diversity
        if self.lat_range[0] > self.lat_range[1]:
            raise ConfigurationError("lat_range must be non-decreasing")
        if self.lon_range[0] > self.lon_range[1]:
            raise ConfigurationError("lon_range must be non-decreasing")
        if len(self.speeds) < 1 or any(s < 0 for s in self.speeds):
            raise ConfigurationError("speeds must be non-negative and non-empty")
        if self.look_jitter < 0:
            raise ConfigurationError("look_jitter must be >= 0")
        if self.rcs <= 0:
            raise ConfigurationError("rcs must be positive")

    def widths(self) -> dict:
        """Per-coordinate standardization widths (zero-width axes are
        skipped by the diversity metric)."""
        return {
            "lat": self.lat_range[1] - self.lat_range[0],
            "lon": self.lon_range[1] - self.lon_range[0],
            "speed": max(self.speeds) - min(self.speeds),
            "heading": self.heading_range[1] - self.heading_range[0],
            "look_jitter": 2.0 * self.look_jitter,
        }

    def draw_units(self, rng) -> np.ndarray:
        """Unit draws: (lat, lon, speed-index fraction, heading, jitter)."""
        return rng.uniform(0.0, 1.0, size=len(PARAMETER_NAMES))

    def params_from_units(self, u) -> dict:
        lat = self.lat_range[0] + u[0] * (self.lat_range[1] - self.lat_range[0])
        lon = self.lon_range[0] + u[1] * (self.lon_range[1] - self.lon_range[0])
        speed = self.speeds[min(int(u[2] * len(self.speeds)), len(self.speeds) - 1)]
        heading = self.heading_range[0] + u[3] * (
            self.heading_range[1] - self.heading_range[0]
        )
        jitter = (2.0 * u[4] - 1.0) * self.look_jitter
        return {"lat": lat, "lon": lon, "speed": float(speed),
                "heading": heading, "look_jitter": jitter}

    def expanded(self, factor: float, lat_bounds=None, lon_bounds=None) -> "ScenarioSpace":
        """Scale every range around its center by ``factor``; lat/lon are
        clipped to the given bounds (scene interior)."""

        def scale_range(rng_pair, bounds):
            center = 0.5 * (rng_pair[0] + rng_pair[1])
            half = 0.5 * (rng_pair[1] - rng_pair[0]) * factor
            lo, hi = center - half, center + half
            if bounds is not None:
                lo, hi = max(lo, bounds[0]), min(hi, bounds[1])
            return (lo, hi)

        mean_speed = sum(self.speeds) / len(self.speeds)
        speeds = tuple(
            max(mean_speed + (s - mean_speed) * factor, 0.0) for s in self.speeds
        )
        heading = scale_range(self.heading_range, (0.0, 360.0))
        return replace(
            self,
            lat_range=scale_range(self.lat_range, lat_bounds),
            lon_range=scale_range(self.lon_range, lon_bounds),
            speeds=speeds,
            heading_range=heading,
            look_jitter=self.look_jitter * factor,
        )

    def to_dict(self) -> dict:
        return {
            "lat_range": list(self.lat_range),
            "lon_range": list(self.lon_range),
            "speeds": list(self.speeds),
            "heading_range": list(self.heading_range),
            "look_jitter": self.look_jitter,
            "rcs": self.rcs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpace":
        known = {f for f in PARAMETER_NAMES} | {"lat_range", "lon_range", "speeds",
                                                "heading_range", "look_jitter", "rcs"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(
            lat_range=tuple(d.get("lat_range", cls.lat_range)),
            lon_range=tuple(d.get("lon_range", cls.lon_range)),
            speeds=tuple(d.get("speeds", cls.speeds)),
            heading_range=tuple(d.get("heading_range", cls.heading_range)),
            look_jitter=d.get("look_jitter", cls.look_jitter),
            rcs=d.get("rcs", cls.rcs),
        )


def parameter_vector(params: dict) -> list:
    return [params[name] for name in PARAMETER_NAMES]


# ---------------------------------------------------------------------------
# Diversity (Eq. 2's metric)
# ---------------------------------------------------------------------------


def diversity(parameter_vectors, widths) -> float:
    """Mean pairwise Euclidean distance over width-standardized vectors.

    A generalization of variance-style spread: zero iff all vectors are
    identical, equal to the pair distance for two points, and linear under
    a uniform scaling of the (pre-standardization) coordinates.
    """
    vectors = np.asarray(parameter_vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) < 1:
        raise ConfigurationError("diversity needs an (n, d) parameter array")
    if len(vectors) == 1:
        return 0.0
    w = np.asarray([widths[name] for name in PARAMETER_NAMES], dtype=np.float64)
    keep = w > 0
    scaled = vectors[:, keep] / w[keep]
    diff = scaled[:, None, :] - scaled[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    n = len(vectors)
    iu = np.triu_indices(n, k=1)
    return float(dist[iu].mean())


# ---------------------------------------------------------------------------
# Dataset manifest + construction
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """A named sample set with count, diversity, and full provenance."""

    name: str
    n: int
    master_seed: int
    scenario: dict
    standardize_widths: dict
    diversity: float
    clutter_delta_db: float
    config: dict
    scene_seed: int
    scene_spec: dict
    platform: dict
    files: list
    parameter_vectors: list
    parent: str | None = None
    build_signature: str = ""

    def content_hash(self) -> str:
        return rtio.json_hash({
            "name": self.name, "n": self.n, "master_seed": self.master_seed,
            "files": self.files, "diversity": self.diversity,
            "scenario": self.scenario, "clutter_delta_db": self.clutter_delta_db,
        })

    def save(self, directory):
        rtio.write_json(Path(directory) / "manifest.json", asdict(self))

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        d = rtio.read_json(Path(directory) / "manifest.json")
        return cls(**d)


def _build_signature(scene_seed, scene_spec, config, platform, scenario, n, seed,
                     delta_db):
    return rtio.json_hash({
        "scene_seed": scene_seed, "scene_spec": scene_spec,
        "config": config, "platform": platform, "scenario": scenario,
        "n": n, "seed": seed, "delta_db": delta_db,
    })


def _sample_inputs(scene, config, platform, scenario, master_seed, index):
    """Deterministic per-index draw -> (config_i, target, params, sim_seed)."""
    rng = rtio.rng_from(master_seed, "sample", index)
    units = scenario.draw_units(rng)
    params = scenario.params_from_units(units)
    target = TargetSpec(
        lat=params["lat"], lon=params["lon"], ground_speed=params["speed"],
        heading=params["heading"], rcs=scenario.rcs,
    )
    geo = patch_geometry(platform, target.lat, target.lon,
                         scene.height_at(target.lat, target.lon))
    config_i = replace(
        config,
        look_azimuth=geo.azimuth + params["look_jitter"],
        look_elevation=geo.elevation,
    )
    sim_seed = rtio.derive_seed(master_seed, "map", index)
    return config_i, target, params, sim_seed


def build_dataset(directory, scene: TerrainScene, config: RadarConfig,
                  platform: PlatformState, scenario: ScenarioSpace, n: int,
                  master_seed: int, name="dataset", workers: int = 1,
                  parent: str | None = None,
                  standardize_widths: dict | None = None,
                  reuse: bool = True) -> DatasetManifest:
    """Simulate ``n`` samples into ``directory`` with per-index seeds.

    Sample files and the manifest are bit-identical for any worker count:
    every sample's randomness derives from (master_seed, index) alone and
    results are written per index.  Existing datasets with the same build
    signature are reused when ``reuse`` is true.
    """
    if n < 1:
        raise ConfigurationError("dataset size must be >= 1")
    scenario.validate()
    directory = Path(directory)
    signature = _build_signature(
        scene.seed, scene.spec, asdict(config), asdict(platform),
        scenario.to_dict(), n, master_seed, config.clutter_scale_db,
    )
    if reuse and (directory / "manifest.json").exists():
        manifest = DatasetManifest.load(directory)
        if manifest.build_signature == signature:
            return manifest
    directory.mkdir(parents=True, exist_ok=True)

    def build_one(index):
        config_i, target, params, sim_seed = _sample_inputs(
            scene, config, platform, scenario, master_seed, index
        )
        rdmap, truth = simulate_rd_map(scene, config_i, platform, target, sim_seed)
        base = directory / f"sample_{index:06d}"
        sidecar = save_rd_map(rdmap, truth, base)
        return index, params, sidecar["data"]["sha256"], base.name

    results = [None] * n
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for index, params, digest, basename in pool.map(build_one, range(n)):
                results[index] = (params, digest, basename)
    else:
        for i in range(n):
            index, params, digest, basename = build_one(i)
            results[index] = (params, digest, basename)

    vectors = [parameter_vector(params) for params, _, _ in results]
    widths = standardize_widths or scenario.widths()
    manifest = DatasetManifest(
        name=name,
        n=n,
        master_seed=master_seed,
        scenario=scenario.to_dict(),
        standardize_widths=dict(widths),
        diversity=diversity(vectors, widths),
        clutter_delta_db=config.clutter_scale_db,
        config=asdict(config),
        scene_seed=scene.seed,
        scene_spec=dict(scene.spec),
        platform=asdict(platform),
        files=[{"base": basename, "sha256": digest}
               for _, digest, basename in results],
        parameter_vectors=vectors,
        parent=parent,
        build_signature=signature,
    )
    manifest.save(directory)
    return manifest


def load_dataset(directory):
    """(maps (n, rows, cols) float64, truths (n, 2) float64, manifest)."""
    directory = Path(directory)
    manifest = DatasetManifest.load(directory)
    maps, truths = [], []
    for entry in manifest.files:
        rdmap, truth = load_rd_map(directory / entry["base"])
        maps.append(rdmap.power)
        truths.append([truth.range_bin, truth.doppler_bin])
    return np.array(maps), np.array(truths, dtype=np.float64), manifest


# ---------------------------------------------------------------------------
# Excursion scaling (Eqs. 1-2)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExcursionSpec:
    """Count multiplier, diversity multiplier, and model perturbations."""

    kappa1: float = 2.0
    kappa2: float = 1.5
    clutter_delta_db: float = 6.0
    expansion_cap: float = 8.0

    def validate(self):
        if self.kappa1 <= 1.0 or self.kappa2 <= 1.0:
            raise ConfigurationError(
                "a proper excursion needs kappa1 > 1 and kappa2 > 1"
            )
        if not math.isfinite(self.clutter_delta_db):
            raise ConfigurationError("clutter_delta_db must be finite")
        if self.expansion_cap < 1.0:
            raise ConfigurationError("expansion_cap must be >= 1")


def _excursion_vectors(scenario, n, master_seed):
    vectors = []
    for i in range(n):
        rng = rtio.rng_from(master_seed, "sample", i)
        units = scenario.draw_units(rng)
        vectors.append(parameter_vector(scenario.params_from_units(units)))
    return vectors


def solve_expansion(parent: DatasetManifest, spec: ExcursionSpec,
                    scene: TerrainScene, master_seed: int,
                    margin_cells: int = 8):
    """Bisection on the range-expansion factor until diversity reaches
    kappa2 * parent diversity.

    Returns (factor, n_samples, achieved_diversity).  Raises
    :class:`UnsatisfiableDiversityError` if the cap (or the scene bounds)
    make the target unreachable.
    """
    spec.validate()
    scenario = ScenarioSpace.from_dict(parent.scenario)
    widths = parent.standardize_widths
    n_s = int(math.ceil(spec.kappa1 * parent.n))
    target_d = spec.kappa2 * parent.diversity

    (lat0, lat1), (lon0, lon1) = scene.latlon_bounds()
    margin_lat = margin_cells * scene.cell_size / 111_320.0
    margin_lon = margin_cells * scene.cell_size / (
        111_320.0 * math.cos(math.radians(scene.origin_lat))
    )
    lat_bounds = (lat0 + margin_lat, lat1 - margin_lat)
    lon_bounds = (lon0 + margin_lon, lon1 - margin_lon)

    def measure(factor):
        expanded = scenario.expanded(factor, lat_bounds, lon_bounds)
        return diversity(_excursion_vectors(expanded, n_s, master_seed), widths)

    if measure(spec.expansion_cap) < target_d:
        raise UnsatisfiableDiversityError(
            f"diversity {target_d:.6g} unreachable at expansion cap "
            f"{spec.expansion_cap} (achieved {measure(spec.expansion_cap):.6g})",
            achieved=measure(spec.expansion_cap),
            target=target_d,
        )
    lo, hi = 1.0, spec.expansion_cap
    if measure(lo) >= target_d:
        hi = lo
    for _ in range(50):
        if hi - lo < 1e-9:
            break
        mid = 0.5 * (lo + hi)
        if measure(mid) >= target_d:
            hi = mid
        else:
            lo = mid
    return hi, n_s, measure(hi)


def scale_excursion(directory, parent: DatasetManifest, spec: ExcursionSpec,
                    scene: TerrainScene, config: RadarConfig,
                    platform: PlatformState, master_seed: int,
                    name="excursion", workers: int = 1) -> DatasetManifest:
    """Build the scaled set: exactly ceil(kappa1 * N) samples, expanded to
    reach kappa2 * D, with the clutter perturbation applied to every sample."""
    factor, n_s, achieved = solve_expansion(parent, spec, scene, master_seed)
    scenario = ScenarioSpace.from_dict(parent.scenario)
    (lat0, lat1), (lon0, lon1) = scene.latlon_bounds()
    margin_lat = 8 * scene.cell_size / 111_320.0
    margin_lon = 8 * scene.cell_size / (
        111_320.0 * math.cos(math.radians(scene.origin_lat))
    )
    expanded = scenario.expanded(
        factor,
        (lat0 + margin_lat, lat1 - margin_lat),
        (lon0 + margin_lon, lon1 - margin_lon),
    )
    perturbed = replace(
        config, clutter_scale_db=config.clutter_scale_db + spec.clutter_delta_db
    )
    manifest = build_dataset(
        directory, scene, perturbed, platform, expanded, n_s, master_seed,
        name=name, workers=workers, parent=parent.content_hash(),
        standardize_widths=parent.standardize_widths,
    )
    if manifest.diversity < spec.kappa2 * parent.diversity - 1e-12:
        raise UnsatisfiableDiversityError(
            f"built diversity {manifest.diversity:.6g} below target "
            f"{spec.kappa2 * parent.diversity:.6g}",
            achieved=manifest.diversity,
            target=spec.kappa2 * parent.diversity,
        )
    return manifest


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateConfig:
    success_target: float = 0.25  # lower CP bound on joint within-1-bin rate
    confidence: float = 0.95
    tolerance: float = 0.05  # convergence CI half-width
    n_min: int = 30


@dataclass(frozen=True)
class RedesignSpec:
    array_factor: int = 2
    tx_power_factor: float = 1.0

    def apply(self, config: RadarConfig) -> RadarConfig:
        return replace(
            config,
            n_horizontal=config.n_horizontal * self.array_factor,
            n_vertical=config.n_vertical * self.array_factor,
            tx_power=config.tx_power * self.tx_power_factor,
        )


@dataclass(frozen=True)
class Phase3Config:
    budget: int = 40
    flag_threshold_bins: float = 5.0
    modes: tuple = ("anomaly",)
    swarm_count: int = 20
    swarm_amplitude_scale: float = 3.0  # x the map's mean target peak power
    swarm_extent: int = 8
    noise_excursion_scale: float = 3.0
    admissibility_margin_db: float = 20.0


@dataclass
class PipelineConfig:
    """Everything a full run needs; one JSON file, one master seed."""

    master_seed: int = 20250809
    workers: int = 1
    output_root: str = "runs/default"
    scene_seed: int = 7
    scene: TerrainSpec = field(default_factory=lambda: TerrainSpec(
        nx=192, ny=192, cell_size=25.0, moisture_urban=0.08, moisture_forest=0.8,
    ))
    platform: PlatformState = field(default_factory=lambda: PlatformState(
        lat=32.4005, lon=-117.1993, height_agl=1000.0, speed=100.0, heading=0.0,
    ))
    radar: RadarConfig = field(default_factory=lambda: RadarConfig(noise_power=1e3))
    scenario: ScenarioSpace = field(default_factory=ScenarioSpace)
    n_samples: int = 500
    folds: int = 5
    localizer: dict = field(default_factory=dict)
    gates: GateConfig = field(default_factory=GateConfig)
    excursion: ExcursionSpec = field(default_factory=ExcursionSpec)
    redesign: RedesignSpec = field(default_factory=RedesignSpec)
    phase3: Phase3Config = field(default_factory=Phase3Config)

    def resolved_radar(self, scene: TerrainScene) -> RadarConfig:
        """Fill in range_start so the window is centered on the target box."""
        if self.radar.range_start > 0:
            return self.radar
        return replace(self.radar, range_start=auto_range_start(
            self.radar, self.platform, scene, self.scenario))


def auto_range_start(config: RadarConfig, platform: PlatformState,
                     scene: TerrainScene, scenario: ScenarioSpace) -> float:
    """Range of bin 0 such that the window is centered on the target box."""
    lat = 0.5 * (scenario.lat_range[0] + scenario.lat_range[1])
    lon = 0.5 * (scenario.lon_range[0] + scenario.lon_range[1])
    geo = patch_geometry(platform, lat, lon, scene.height_at(lat, lon))
    center_bin = geo.slant_range / config.range_bin
    return max(math.floor(center_bin - config.n_range_bins / 2), 0) * config.range_bin


# ---------------------------------------------------------------------------
# Phase reports
# ---------------------------------------------------------------------------


@dataclass
class PhaseReport:
    phase: str
    passed: bool
    gate: dict
    datasets: dict
    algorithms: dict  # name -> MetricReport dict
    convergence: dict = field(default_factory=dict)
    folds: dict = field(default_factory=dict)
    redesign: dict = field(default_factory=dict)
    recommendations: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    timing_s: float = 0.0

    def save(self, path):
        rtio.write_json(path, asdict(self))

    @classmethod
    def load(cls, path) -> "PhaseReport":
        return cls(**rtio.read_json(path))

    def metric(self, algorithm: str) -> MetricReport:
        return MetricReport.from_dict(self.algorithms[algorithm])


def _evaluate_classical(maps, truths, cfar: CfarDetector):
    """ArgMax + CFAR metric reports for one map set."""
    argmax_est = ArgMaxLocalizer().predict(maps)
    detections = [
        np.array([d.as_array() for d in dets]).reshape(-1, 2)
        for dets in cfar.predict(maps)
    ]
    cfar_est = np.array([cfar.point_estimate(m).as_array() for m in maps])
    return {
        "argmax": compute_report("argmax", argmax_est, truths),
        "cfar": compute_report("cfar", cfar_est, truths,
                               detections_per_map=detections),
    }


def _aggregate_cnn(fold_results, maps, truths):
    """Pool every fold's held-out predictions into one report + a success
    vector ordered by global sample index."""
    n = len(maps)
    estimates = np.full((n, 2), np.nan)
    for fr in fold_results:
        estimates[fr.val_indices] = fr.model.predict(maps[fr.val_indices])
    covered = ~np.isnan(estimates[:, 0])
    report = compute_report("cnn", estimates[covered], truths[covered])
    ok = np.all(np.abs(np.rint(estimates[covered]) - truths[covered]) <= 1, axis=1)
    return report, estimates, ok


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------


def run_phase1(cfg: PipelineConfig) -> PhaseReport:
    start = time.perf_counter()
    root = Path(cfg.output_root)
    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)

    manifest = build_dataset(
        root / "datasets" / "baseline", scene, radar, cfg.platform, cfg.scenario,
        cfg.n_samples, cfg.master_seed, name="baseline", workers=cfg.workers,
    )
    maps, truths, _ = load_dataset(root / "datasets" / "baseline")

    fold_results, fold_hash = cross_validate(
        maps, truths, folds=cfg.folds, seed=cfg.master_seed,
        localizer_params=cfg.localizer, workers=cfg.workers,
    )
    for fr in fold_results:
        fr.model.save(root / "models" / "phase1" / f"fold_{fr.fold}",
                      extra={"fold": fr.fold, "dataset": manifest.content_hash()})

    cnn_report, _, successes = _aggregate_cnn(fold_results, maps, truths)
    algorithms = {"cnn": cnn_report}
    algorithms.update(_evaluate_classical(maps, truths, CfarDetector()))

    state = ConvergenceState(n_min=cfg.gates.n_min)
    converged_at = None
    for value in successes.astype(np.float64):
        state = convergence_update(state, value)
        if converged_at is None and state.converged(cfg.gates.tolerance):
            converged_at = state.n
    budget_exceeded = converged_at is None

    n_success = int(successes.sum())
    passed_gate, lower = success_gate(
        n_success, len(successes), cfg.gates.success_target, cfg.gates.confidence
    )
    passed = passed_gate and not budget_exceeded
    recommendations = []
    if not passed:
        recommendations = [
            "increase tx_power (raises target return against noise)",
            "increase array size n_horizontal/n_vertical "
            "(narrows the beam, suppresses mainbeam clutter)",
            "increase dataset n_samples or relax the convergence tolerance",
        ]

    report = PhaseReport(
        phase="phase1",
        passed=bool(passed),
        gate={
            "success_target": cfg.gates.success_target,
            "confidence": cfg.gates.confidence,
            "successes": n_success,
            "n": int(len(successes)),
            "lower_bound": lower,
            "passed": bool(passed_gate),
        },
        datasets={"baseline": manifest.content_hash()},
        algorithms={k: v.to_dict() for k, v in algorithms.items()},
        convergence={
            "mean": state.mean,
            "half_width": state.half_width,
            "tolerance": cfg.gates.tolerance,
            "n": state.n,
            "converged": not budget_exceeded,
            "converged_at": converged_at,
            "outcome": "budget-exceeded" if budget_exceeded else "converged",
        },
        folds={
            "count": cfg.folds,
            "assignment_hash": fold_hash,
            "cnn_reports": [fr.report.to_dict() for fr in fold_results],
        },
        recommendations=recommendations,
        seeds={"master_seed": cfg.master_seed, "scene_seed": cfg.scene_seed},
        timing_s=time.perf_counter() - start,
    )
    report.save(root / "reports" / "phase1.json")
    return report


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------


def run_phase2(cfg: PipelineConfig) -> PhaseReport:
    start = time.perf_counter()
    root = Path(cfg.output_root)
    phase1_path = root / "reports" / "phase1.json"
    if not phase1_path.exists():
        raise PhaseOrderError("phase1 report not found; run phase1 first")
    phase1 = PhaseReport.load(phase1_path)
    if not phase1.passed:
        raise PhaseOrderError("phase1 gate did not pass; fix the design first")

    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)
    baseline = DatasetManifest.load(root / "datasets" / "baseline")

    # (a) excursion set + baseline models on it
    excursion_seed = rtio.derive_seed(cfg.master_seed, "excursion")
    excursion = scale_excursion(
        root / "datasets" / "excursion", baseline, cfg.excursion, scene, radar,
        cfg.platform, excursion_seed, workers=cfg.workers,
    )
    maps_s, truths_s, _ = load_dataset(root / "datasets" / "excursion")

    baseline_models = [
        CnnLocalizer.load(root / "models" / "phase1" / f"fold_{k}")
        for k in range(cfg.folds)
    ]
    est_stack = np.stack([m.predict(maps_s) for m in baseline_models])
    baseline_on_excursion = compute_report(
        "cnn_baseline_on_excursion", est_stack.mean(axis=0), truths_s
    )
    per_model = [
        compute_report(f"cnn_fold{k}_on_excursion", est_stack[k], truths_s)
        for k in range(len(baseline_models))
    ]
    classical_exc = _evaluate_classical(maps_s, truths_s, CfarDetector())

    # (b) redesign: double the array, regenerate at the excursion condition,
    # retrain
    redesigned = cfg.redesign.apply(radar)
    redesign_seed = rtio.derive_seed(cfg.master_seed, "redesign")
    expanded_scenario = ScenarioSpace.from_dict(excursion.scenario)
    perturbed_redesign = replace(
        redesigned,
        clutter_scale_db=radar.clutter_scale_db + cfg.excursion.clutter_delta_db,
    )
    redesign_manifest = build_dataset(
        root / "datasets" / "redesign", scene, perturbed_redesign, cfg.platform,
        expanded_scenario, excursion.n, redesign_seed, name="redesign",
        workers=cfg.workers, parent=excursion.content_hash(),
        standardize_widths=baseline.standardize_widths,
    )
    maps_t, truths_t, _ = load_dataset(root / "datasets" / "redesign")
    fold_results, fold_hash = cross_validate(
        maps_t, truths_t, folds=cfg.folds, seed=redesign_seed,
        localizer_params=cfg.localizer, workers=cfg.workers,
    )
    for fr in fold_results:
        fr.model.save(root / "models" / "phase2" / f"fold_{fr.fold}",
                      extra={"fold": fr.fold,
                             "dataset": redesign_manifest.content_hash()})
    retrained_report, _, successes_b = _aggregate_cnn(fold_results, maps_t, truths_t)

    # (c) the retrained models with the perturbation removed
    nominal_redesign = build_dataset(
        root / "datasets" / "redesign_nominal", scene, redesigned, cfg.platform,
        expanded_scenario, excursion.n, redesign_seed, name="redesign_nominal",
        workers=cfg.workers, parent=redesign_manifest.content_hash(),
        standardize_widths=baseline.standardize_widths,
    )
    maps_t0, truths_t0, _ = load_dataset(root / "datasets" / "redesign_nominal")
    est0 = np.full((len(maps_t0), 2), np.nan)
    for fr in fold_results:
        est0[fr.val_indices] = fr.model.predict(maps_t0[fr.val_indices])
    unperturbed_report = compute_report("cnn_redesign_unperturbed", est0, truths_t0)
    ok0 = np.all(np.abs(np.rint(est0) - truths_t0) <= 1, axis=1)

    gate_b, lower_b = success_gate(
        int(successes_b.sum()), len(successes_b), cfg.gates.success_target,
        cfg.gates.confidence,
    )
    gate_c, lower_c = success_gate(
        int(ok0.sum()), len(ok0), cfg.gates.success_target, cfg.gates.confidence
    )
    passed = bool(gate_b and gate_c)

    algorithms = {
        "cnn_baseline_on_excursion": baseline_on_excursion.to_dict(),
        "cnn_redesign_retrained": retrained_report.to_dict(),
        "cnn_redesign_unperturbed": unperturbed_report.to_dict(),
        "argmax_on_excursion": classical_exc["argmax"].to_dict(),
        "cfar_on_excursion": classical_exc["cfar"].to_dict(),
    }
    report = PhaseReport(
        phase="phase2",
        passed=passed,
        gate={
            "success_target": cfg.gates.success_target,
            "confidence": cfg.gates.confidence,
            "redesign_perturbed": {"lower_bound": lower_b, "passed": bool(gate_b)},
            "redesign_unperturbed": {"lower_bound": lower_c, "passed": bool(gate_c)},
        },
        datasets={
            "baseline": baseline.content_hash(),
            "excursion": excursion.content_hash(),
            "redesign": redesign_manifest.content_hash(),
            "redesign_nominal": nominal_redesign.content_hash(),
        },
        algorithms=algorithms,
        folds={
            "count": cfg.folds,
            "assignment_hash": fold_hash,
            "cnn_reports": [fr.report.to_dict() for fr in fold_results],
            "baseline_on_excursion_per_fold": [r.to_dict() for r in per_model],
        },
        redesign={
            "array_factor": cfg.redesign.array_factor,
            "array": [redesigned.n_horizontal, redesigned.n_vertical],
            "excursion": asdict(cfg.excursion),
            "expansion": {
                "n": excursion.n,
                "diversity": excursion.diversity,
                "baseline_diversity": baseline.diversity,
            },
        },
        seeds={
            "master_seed": cfg.master_seed,
            "excursion_seed": excursion_seed,
            "redesign_seed": redesign_seed,
        },
        timing_s=time.perf_counter() - start,
    )
    report.save(root / "reports" / "phase2.json")
    return report


# ---------------------------------------------------------------------------
# Phase 3
# ---------------------------------------------------------------------------


@dataclass
class BlackSwanEvent:
    index: int
    mode: str
    error_bins: float
    estimate: list
    truth: list
    seeds: dict
    anomaly: dict | None
    map_sha256: str


@dataclass
class BlackSwanReport:
    phase: str
    n_streamed: int
    n_flagged: int
    n_rejected: int
    flag_threshold_bins: float
    events: list  # ranked by error, descending
    seeds: dict
    timing_s: float = 0.0

    def save(self, path):
        rtio.write_json(path, asdict(self))

    @classmethod
    def load(cls, path) -> "BlackSwanReport":
        return cls(**rtio.read_json(path))


def _phase3_sample(cfg: PipelineConfig, scene, radar, index, mode,
                   generator_bundle=None):
    """Build one phase-3 stream sample; returns (RDMap, truth, seeds, anomaly)."""
    from . import blackswan as bs

    stream_seed = rtio.derive_seed(cfg.master_seed, "phase3", index)
    config_i, target, params, sim_seed = _sample_inputs(
        scene, radar, cfg.platform, cfg.scenario, stream_seed, 0
    )
    anomaly = None
    if mode == "anomaly":
        rdmap, truth = simulate_rd_map(scene, config_i, cfg.platform, target,
                                       sim_seed)
        target_only, _ = simulate_rd_map(
            scene, config_i, cfg.platform, target, sim_seed,
            include_clutter=False, include_noise=False,
        )
        anomaly = bs.AnomalySpec(
            kind="scatterer_swarm",
            count=cfg.phase3.swarm_count,
            amplitude=float(target_only.power.max())
            * cfg.phase3.swarm_amplitude_scale,
            extent=cfg.phase3.swarm_extent,
            placement_seed=rtio.derive_seed(stream_seed, "swarm"),
            center=(truth.range_bin, truth.doppler_bin),
        )
        rdmap = bs.inject_anomaly(rdmap, anomaly)
    elif mode in ("gan", "gan_excursion"):
        if generator_bundle is None:
            raise ConfigurationError(f"mode {mode!r} needs a generator bundle")
        bundle = generator_bundle
        if mode == "gan_excursion":
            bundle = bs.GeneratorBundle(
                generator=generator_bundle.generator,
                discriminator=generator_bundle.discriminator,
                noise_spec=bs.noise_excursion(
                    generator_bundle.noise_spec,
                    scale_factor=cfg.phase3.noise_excursion_scale,
                ),
                normalization=generator_bundle.normalization,
                provenance=generator_bundle.provenance,
            )
        from .rfsim import clutter_components, target_component
        conditioning = _phase3_conditioning(bundle, scene, radar)
        t_bin, t_coef, t_dopp = target_component(
            scene, config_i, cfg.platform, target, sim_seed
        )
        # physical recalibration: generated texture carries the nominal
        # window's total clutter power
        _, nominal_coef, _ = clutter_components(scene, config_i, cfg.platform,
                                                seed=sim_seed)
        calibration = float(np.sum(np.abs(nominal_coef) ** 2))
        rdmap, _ = bs.rd_map_from_generated_clutter(
            bundle, conditioning, config_i, cfg.platform, sim_seed,
            target_components=(t_bin, t_coef, t_dopp),
            calibration_total=calibration,
        )
        truth = _truth_for(config_i, target, t_bin, t_dopp)
    else:
        raise ConfigurationError(f"unknown phase3 mode {mode!r}")
    seeds = {"stream_seed": stream_seed, "sim_seed": sim_seed, "mode": mode}
    return rdmap, truth, seeds, anomaly


def _truth_for(config, target, range_bin, doppler):
    from .rfsim import TruthLabel, doppler_bin_index

    return TruthLabel(
        range_bin=range_bin,
        doppler_bin=doppler_bin_index(doppler, config),
        target=target,
    )


def _phase3_conditioning(bundle, scene, config):
    """Terrain conditioning sampled the way the generator was trained: a
    virtual platform over the scene center, 1 km above mean terrain."""
    from .blackswan import polar_clutter_power

    lat, lon = scene.center_latlon
    virtual = PlatformState(
        lat=lat, lon=lon, height_agl=float(scene.height.mean()) + 1000.0,
        speed=100.0, heading=0.0,
    )
    grid = bundle.normalization["grid"]
    power, height, classes = polar_clutter_power(
        scene, virtual, config,
        n_range=grid[0], n_azimuth=grid[1],
        r_min=bundle.normalization["r_min"], r_max=bundle.normalization["r_max"],
    )
    h_lo, h_hi = height.min(), height.max()
    cond = np.zeros((2, grid[0], grid[1]), dtype=np.float32)
    cond[0] = (height - h_lo) / max(h_hi - h_lo, 1e-9)
    cond[1] = classes / 3.0
    return cond


def run_phase3(cfg: PipelineConfig, model: CnnLocalizer | None = None,
               generator_bundle=None) -> BlackSwanReport:
    """Stream budgeted black-swan candidates past the deployed model.

    Not a gate: an empty report is a valid outcome.  Every flagged event
    records the seeds that regenerate the identical map.
    """
    from . import blackswan as bs

    start = time.perf_counter()
    root = Path(cfg.output_root)
    if model is None:
        model_dir = root / "models" / "phase2" / "fold_0"
        if not (Path(model_dir) / "model.json").exists():
            raise PhaseOrderError(
                "no deployed model: run phase2 (or pass a model) first"
            )
        model = CnnLocalizer.load(model_dir)

    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)
    if any(m in ("gan", "gan_excursion") for m in cfg.phase3.modes):
        if generator_bundle is None:
            bundle_dir = root / "models" / "gan"
            if not (bundle_dir / "bundle.json").exists():
                raise PhaseOrderError(
                    "phase3 gan modes need a trained generator bundle"
                )
            generator_bundle = bs.GeneratorBundle.load(bundle_dir)

    bound = bs.admissible_power_bound(
        scene, radar, cfg.platform, cfg.phase3.admissibility_margin_db
    )
    events = []
    n_rejected = 0
    for index in range(cfg.phase3.budget):
        mode = cfg.phase3.modes[index % len(cfg.phase3.modes)]
        rdmap, truth, seeds, anomaly = _phase3_sample(
            cfg, scene, radar, index, mode, generator_bundle
        )
        if not bs.is_admissible(rdmap, bound):
            n_rejected += 1
            continue
        estimate = model.predict(rdmap.power[None])[0]
        error = float(np.max(np.abs(
            estimate - np.array([truth.range_bin, truth.doppler_bin])
        )))
        if error > cfg.phase3.flag_threshold_bins:
            events.append(BlackSwanEvent(
                index=index,
                mode=mode,
                error_bins=error,
                estimate=[float(estimate[0]), float(estimate[1])],
                truth=[int(truth.range_bin), int(truth.doppler_bin)],
                seeds=seeds,
                anomaly=None if anomaly is None else asdict(anomaly),
                map_sha256=rtio.sha256_hex(
                    np.ascontiguousarray(rdmap.power, dtype="<f4").tobytes()
                ),
            ))
    events.sort(key=lambda e: -e.error_bins)
    report = BlackSwanReport(
        phase="phase3",
        n_streamed=cfg.phase3.budget,
        n_flagged=len(events),
        n_rejected=n_rejected,
        flag_threshold_bins=cfg.phase3.flag_threshold_bins,
        events=[asdict(e) for e in events],
        seeds={"master_seed": cfg.master_seed},
        timing_s=time.perf_counter() - start,
    )
    report.save(root / "reports" / "phase3.json")
    return report


def reproduce_event(cfg: PipelineConfig, event: dict,
                    generator_bundle=None):
    """Regenerate the exact map of a flagged event from its seeds."""
    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)
    rdmap, truth, _, _ = _phase3_sample(
        cfg, scene, radar, event["index"], event["seeds"]["mode"],
        generator_bundle,
    )
    return rdmap, truth
