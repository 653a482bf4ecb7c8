import math

import numpy as np
import pytest

from radartwin import pipeline as pl
from radartwin.errors import (
    ConfigurationError,
    PhaseOrderError,
    UnsatisfiableDiversityError,
)
from radartwin.scene import generate_terrain
from tests.conftest import fast_pipeline_config


# ---------------------------------------------------------------------------
# Scenario space + diversity
# ---------------------------------------------------------------------------

UNIT_WIDTHS = {name: 1.0 for name in pl.PARAMETER_NAMES}


def test_diversity_identical_vectors_zero():
    vectors = [[1.0, 2.0, 3.0, 4.0, 5.0]] * 10
    assert pl.diversity(vectors, UNIT_WIDTHS) == 0.0


def test_diversity_pair_equals_distance():
    a = [0.0, 0.0, 0.0, 0.0, 0.0]
    b = [3.0, 4.0, 0.0, 0.0, 0.0]
    assert pl.diversity([a, b], UNIT_WIDTHS) == pytest.approx(5.0)


def test_diversity_scales_linearly():
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(12, 5))
    base = pl.diversity(vectors, UNIT_WIDTHS)
    scaled = pl.diversity(3.0 * vectors, UNIT_WIDTHS)
    assert scaled == pytest.approx(3.0 * base, rel=1e-12)
    # brute-force pairwise oracle
    total, count = 0.0, 0
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            total += float(np.linalg.norm(vectors[i] - vectors[j]))
            count += 1
    assert base == pytest.approx(total / count, rel=1e-12)


def test_diversity_skips_zero_width_axes():
    vectors = [[0.0, 1.0, 5.0, 0.0, 0.0], [1.0, 2.0, 5.0, 0.0, 0.0]]
    widths = dict(UNIT_WIDTHS, speed=0.0)
    assert pl.diversity(vectors, widths) == pytest.approx(math.sqrt(2.0))


def test_scenario_units_are_deterministic_and_expandable():
    scenario = pl.ScenarioSpace()
    rng = np.random.default_rng(5)
    units = scenario.draw_units(rng)
    params = scenario.params_from_units(units)
    assert scenario.lat_range[0] <= params["lat"] <= scenario.lat_range[1]
    assert params["speed"] in scenario.speeds
    wide = scenario.expanded(2.0)
    expanded_params = wide.params_from_units(units)
    center = 0.5 * (scenario.lat_range[0] + scenario.lat_range[1])
    assert expanded_params["lat"] - center == pytest.approx(
        2.0 * (params["lat"] - center), rel=1e-9
    )


def test_scenario_expansion_respects_bounds():
    scenario = pl.ScenarioSpace(lat_range=(32.54, 32.56))
    wide = scenario.expanded(100.0, lat_bounds=(32.5, 32.6))
    assert wide.lat_range == (32.5, 32.6)


def test_degenerate_point_box_gives_zero_location_diversity(tmp_path):
    cfg = fast_pipeline_config(tmp_path, scenario=pl.ScenarioSpace(
        lat_range=(32.5505, 32.5505), lon_range=(-117.0493, -117.0493),
        speeds=(7.0,), heading_range=(0.0, 0.0), look_jitter=0.0, rcs=40.0,
    ))
    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)
    manifest = pl.build_dataset(
        tmp_path / "point", scene, radar, cfg.platform, cfg.scenario, 5,
        master_seed=1, name="point",
    )
    vectors = np.asarray(manifest.parameter_vectors)
    assert np.ptp(vectors[:, 0]) == 0.0  # all samples share the target location
    assert np.ptp(vectors[:, 1]) == 0.0
    assert manifest.diversity == 0.0


def test_inverted_range_rejected():
    with pytest.raises(ConfigurationError):
        pl.ScenarioSpace(lat_range=(32.6, 32.5)).validate()


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("datasets")
    cfg = fast_pipeline_config(root)
    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)
    manifest = pl.build_dataset(
        root / "base", scene, radar, cfg.platform, cfg.scenario, 12,
        master_seed=cfg.master_seed, name="base",
    )
    return cfg, scene, radar, manifest, root


def test_build_dataset_writes_files_and_manifest(built):
    cfg, scene, radar, manifest, root = built
    assert manifest.n == 12
    assert len(manifest.files) == 12
    assert (root / "base" / "manifest.json").exists()
    assert (root / "base" / "sample_000000.f32").exists()
    maps, truths, _ = pl.load_dataset(root / "base")
    assert maps.shape == (12, radar.n_range_bins, radar.n_pulses)
    assert np.all(truths[:, 0] < radar.n_range_bins)


def test_build_dataset_hash_stable_across_rebuilds(built, tmp_path):
    cfg, scene, radar, manifest, root = built
    again = pl.build_dataset(
        tmp_path / "other", scene, radar, cfg.platform, cfg.scenario, 12,
        master_seed=cfg.master_seed, name="base",
    )
    assert again.content_hash() == manifest.content_hash()
    assert [f["sha256"] for f in again.files] == [f["sha256"] for f in manifest.files]


def test_build_dataset_worker_count_invariant(built, tmp_path):
    cfg, scene, radar, manifest, root = built
    parallel = pl.build_dataset(
        tmp_path / "par", scene, radar, cfg.platform, cfg.scenario, 12,
        master_seed=cfg.master_seed, name="base", workers=8,
    )
    assert parallel.content_hash() == manifest.content_hash()


def test_build_dataset_reuse_on_same_signature(built):
    cfg, scene, radar, manifest, root = built
    reused = pl.build_dataset(
        root / "base", scene, radar, cfg.platform, cfg.scenario, 12,
        master_seed=cfg.master_seed, name="base",
    )
    assert reused.build_signature == manifest.build_signature


def test_manifest_diversity_recomputable(built):
    cfg, scene, radar, manifest, root = built
    recomputed = pl.diversity(manifest.parameter_vectors,
                              manifest.standardize_widths)
    assert recomputed == pytest.approx(manifest.diversity, abs=1e-9)


# ---------------------------------------------------------------------------
# Excursion scaling (Eqs. 1-2)
# ---------------------------------------------------------------------------


def test_excursion_spec_requires_proper_kappas():
    with pytest.raises(ConfigurationError):
        pl.ExcursionSpec(kappa1=1.0).validate()
    with pytest.raises(ConfigurationError):
        pl.ExcursionSpec(kappa2=0.9).validate()


def test_scale_excursion_counts_and_diversity(built, tmp_path):
    cfg, scene, radar, manifest, root = built
    spec = pl.ExcursionSpec(kappa1=2.0, kappa2=1.5, clutter_delta_db=6.0)
    excursion = pl.scale_excursion(
        tmp_path / "exc", manifest, spec, scene, radar, cfg.platform,
        master_seed=99, name="exc",
    )
    assert excursion.n == math.ceil(2.0 * manifest.n)
    assert excursion.diversity >= 1.5 * manifest.diversity - 1e-12
    assert excursion.parent == manifest.content_hash()
    # the clutter perturbation is recorded on every sample's config
    assert excursion.clutter_delta_db == pytest.approx(6.0)
    assert 10.0 ** (excursion.config["clutter_scale_db"] / 10.0) == pytest.approx(
        3.981, rel=1e-3
    )


def test_scale_excursion_minimal_expansion(built, tmp_path):
    cfg, scene, radar, manifest, root = built
    spec = pl.ExcursionSpec(kappa1=2.0, kappa2=1.0 + 1e-6, clutter_delta_db=0.0)
    factor, n_s, achieved = pl.solve_expansion(manifest, spec, scene, 99)
    assert n_s == 2 * manifest.n
    ratio = achieved / manifest.diversity
    assert (1.0 + 1e-6) <= ratio <= 1.05 + 1e-6


def test_scale_excursion_unsatisfiable_reports_achieved(built, tmp_path):
    cfg, scene, radar, manifest, root = built
    spec = pl.ExcursionSpec(kappa1=2.0, kappa2=50.0, expansion_cap=1.5)
    with pytest.raises(UnsatisfiableDiversityError) as exc:
        pl.solve_expansion(manifest, spec, scene, 99)
    assert exc.value.achieved > 0
    assert exc.value.target == pytest.approx(50.0 * manifest.diversity)


# ---------------------------------------------------------------------------
# Phases (plumbing-level; physics claims live in the acceptance suite)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def phase_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("phases")
    cfg = fast_pipeline_config(root)
    report1 = pl.run_phase1(cfg)
    return cfg, report1


def test_phase1_report_contents(phase_run):
    cfg, report = phase_run
    assert report.phase == "phase1"
    assert report.passed
    assert set(report.algorithms) == {"cnn", "argmax", "cfar"}
    assert report.convergence["outcome"] == "converged"
    assert len(report.folds["cnn_reports"]) == cfg.folds
    assert (report.gate["successes"] <= report.gate["n"])
    assert (pl.Path(cfg.output_root) / "reports" / "phase1.json").exists()


def test_phase1_rerun_reproduces_metrics(phase_run):
    cfg, report = phase_run
    again = pl.run_phase1(cfg)
    assert again.algorithms == report.algorithms
    assert again.gate == report.gate
    assert again.folds["assignment_hash"] == report.folds["assignment_hash"]


def test_phase1_budget_exceeded_outcome(tmp_path):
    # tolerance 0 can never be met, so the sample budget always runs out
    cfg = fast_pipeline_config(
        tmp_path, n_samples=12, folds=3,
        gates=pl.GateConfig(success_target=0.0, tolerance=0.0, n_min=5),
    )
    report = pl.run_phase1(cfg)
    assert report.convergence["outcome"] == "budget-exceeded"
    assert not report.passed
    assert report.recommendations  # design knobs surfaced


def test_phase2_requires_phase1(tmp_path):
    cfg = fast_pipeline_config(tmp_path / "empty")
    with pytest.raises(PhaseOrderError):
        pl.run_phase2(cfg)


def test_phase2_requires_phase1_pass(tmp_path):
    cfg = fast_pipeline_config(
        tmp_path, gates=pl.GateConfig(success_target=0.9999, tolerance=1.0,
                                      n_min=5),
    )
    report = pl.run_phase1(cfg)
    assert not report.passed
    with pytest.raises(PhaseOrderError):
        pl.run_phase2(cfg)


@pytest.fixture(scope="module")
def phase2_run(phase_run):
    cfg, _ = phase_run
    report2 = pl.run_phase2(cfg)
    return cfg, report2


def test_phase2_report_contents(phase2_run):
    cfg, report = phase2_run
    assert report.phase == "phase2"
    assert set(report.datasets) == {"baseline", "excursion", "redesign",
                                    "redesign_nominal"}
    assert "cnn_baseline_on_excursion" in report.algorithms
    assert "cnn_redesign_retrained" in report.algorithms
    assert "cnn_redesign_unperturbed" in report.algorithms
    assert report.redesign["array"] == [20, 10]
    n_r = pl.DatasetManifest.load(
        pl.Path(cfg.output_root) / "datasets" / "baseline").n
    n_s = pl.DatasetManifest.load(
        pl.Path(cfg.output_root) / "datasets" / "excursion").n
    assert n_s == math.ceil(cfg.excursion.kappa1 * n_r)


def test_phase3_flags_and_reproduces(phase2_run):
    cfg, _ = phase2_run
    cfg3 = replace_phase3(cfg, budget=4, flag_threshold_bins=0.0)
    report = pl.run_phase3(cfg3)
    assert report.n_flagged + report.n_rejected == report.n_streamed
    assert report.n_flagged >= 1  # threshold 0: every admissible sample flags
    errors = [e["error_bins"] for e in report.events]
    assert errors == sorted(errors, reverse=True)
    event = report.events[0]
    rdmap, truth = pl.reproduce_event(cfg3, event)
    digest = pl.rtio.sha256_hex(
        np.ascontiguousarray(rdmap.power, dtype="<f4").tobytes()
    )
    assert digest == event["map_sha256"]


def test_phase3_empty_report_is_valid(phase2_run):
    cfg, _ = phase2_run
    cfg3 = replace_phase3(cfg, budget=3, flag_threshold_bins=1e9)
    report = pl.run_phase3(cfg3)
    assert report.n_flagged == 0
    assert report.events == []


def test_phase3_with_injected_oracle_model(tmp_path):
    # a perfect-lookup stand-in: phase3 must produce an empty report on
    # nominal (non-anomalous) samples when the model is never wrong
    cfg = fast_pipeline_config(tmp_path, phase3=pl.Phase3Config(
        budget=3, flag_threshold_bins=5.0, modes=("anomaly",),
        swarm_count=0, swarm_amplitude_scale=0.0,
    ))

    class Oracle:
        def predict(self, maps):
            from radartwin.localize import argmax_localize
            return np.array([argmax_localize(m).as_array() for m in maps])

    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    # crank the target so argmax is exact, making the oracle well-trained
    cfg.scenario = pl.ScenarioSpace(
        lat_range=cfg.scenario.lat_range, lon_range=cfg.scenario.lon_range,
        speeds=(7.0,), heading_range=(0.0, 360.0), rcs=1e5,
    )
    report = pl.run_phase3(cfg, model=Oracle())
    assert report.n_flagged == 0


def replace_phase3(cfg, **kw):
    params = dict(
        budget=cfg.phase3.budget,
        flag_threshold_bins=cfg.phase3.flag_threshold_bins,
        modes=cfg.phase3.modes,
        swarm_count=cfg.phase3.swarm_count,
        swarm_amplitude_scale=cfg.phase3.swarm_amplitude_scale,
        swarm_extent=cfg.phase3.swarm_extent,
    )
    params.update(kw)
    clone = fast_pipeline_config(cfg.output_root, phase3=pl.Phase3Config(**params))
    return clone
