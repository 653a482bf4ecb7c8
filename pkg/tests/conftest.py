import pytest

from radartwin.pipeline import (
    ExcursionSpec,
    GateConfig,
    Phase3Config,
    PipelineConfig,
    ScenarioSpace,
)
from radartwin.rfsim import RadarConfig
from radartwin.scene import PlatformState, TerrainSpec


def fast_pipeline_config(output_root, **overrides) -> PipelineConfig:
    """Desk-top-of-the-desk configuration: tiny scene, tiny maps, two-epoch
    training.  Exercises every pipeline contract in seconds; the
    physics-quality runs live in the acceptance suite."""
    defaults = dict(
        master_seed=1234,
        workers=1,
        output_root=str(output_root),
        scene_seed=7,
        scene=TerrainSpec(nx=48, ny=48, cell_size=50.0,
                          moisture_urban=0.08, moisture_forest=0.8),
        platform=PlatformState(lat=32.4005, lon=-117.1993, height_agl=1000.0,
                               speed=100.0, heading=0.0),
        radar=RadarConfig(n_range_bins=48, n_pulses=32, noise_power=1e3),
        scenario=ScenarioSpace(
            lat_range=(32.5495, 32.5515),
            lon_range=(-117.0513, -117.0473),
            speeds=(7.0, 14.0),
            heading_range=(0.0, 360.0),
            rcs=40.0,
        ),
        n_samples=24,
        folds=3,
        localizer=dict(epochs=2, batch_size=8, input_shape=(48, 32)),
        gates=GateConfig(success_target=0.0, tolerance=1.0, n_min=5),
        excursion=ExcursionSpec(kappa1=2.0, kappa2=1.5, clutter_delta_db=6.0),
        phase3=Phase3Config(budget=4, flag_threshold_bins=5.0),
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


@pytest.fixture(scope="session")
def fast_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline_run")
    return fast_pipeline_config(root)
