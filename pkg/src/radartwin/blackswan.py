"""Conditional generative clutter model and black-swan sample machinery.

A pix2pix-style conditional GAN at desk scale: terrain conditioning
(normalized height + landcover) maps to a clutter-power image on a polar
(range x azimuth) grid.  Per the training-data recipe, clutter power is
range-squared compensated, log-scaled, and normalized to [0, 1]; the
platform sits 1 km above mean terrain with an omnidirectional antenna.

The same module owns the black-swan levers: noise-distribution
excursions for the generator's excitation and direct anomaly injection
(scatterer swarms, Doppler streaks, out-of-distribution noise) into RD
maps, plus the physical-power admissibility bound that generated or
injected maps must respect.
"""

import math
import time
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import io as rtio
from . import nnet
from .errors import ConfigurationError, TrainingFailure
from .scene import (
    BACKSCATTER_DB,
    METERS_PER_DEG,
    PlatformState,
    TerrainScene,
    TerrainSpec,
    generate_terrain,
)
from .rfsim import (
    RadarConfig,
    RDMap,
    accumulate_slow_time,
    radar_equation_amplitude,
    rd_power,
)

_TINY_POWER = 1e-30


# ---------------------------------------------------------------------------
# Noise specification + excursions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of the generator's excitation noise.

    ``scale`` is the standard deviation for every family; the uniform
    family draws on [mean - sqrt(3) scale, mean + sqrt(3) scale] so a
    family swap is variance-matched by construction.
    """

    family: str = "normal"
    mean: float = 0.0
    scale: float = 1.0
    shape: tuple = (1, 64, 64)
    provenance: tuple = ()

    def validate(self):
        if self.family not in ("normal", "uniform"):
            raise ConfigurationError(f"unknown noise family {self.family!r}")
        if not (math.isfinite(self.mean) and math.isfinite(self.scale)):
            raise ConfigurationError("noise parameters must be finite")
        if self.scale < 0:
            raise ConfigurationError("noise scale must be >= 0")

    def distribution(self) -> dict:
        return {"family": self.family, "mean": self.mean, "scale": self.scale,
                "shape": list(self.shape)}

    def draw(self, rng) -> np.ndarray:
        self.validate()
        if self.family == "normal":
            return rng.normal(self.mean, self.scale, size=self.shape)
        half = math.sqrt(3.0) * self.scale
        return rng.uniform(self.mean - half, self.mean + half, size=self.shape)


def noise_excursion(spec: NoiseSpec, scale_factor: float = 1.0,
                    family: str | None = None,
                    mean_shift: float = 0.0) -> NoiseSpec:
    """Mutate a noise spec; the identity mutation returns an equal spec.

    Mutations are recorded in the provenance chain.
    """
    if not (math.isfinite(scale_factor) and math.isfinite(mean_shift)):
        raise ConfigurationError("noise mutation parameters must be finite")
    if scale_factor == 1.0 and mean_shift == 0.0 and family in (None, spec.family):
        return replace(spec)
    mutated = NoiseSpec(
        family=spec.family if family is None else family,
        mean=spec.mean + mean_shift,
        scale=spec.scale * scale_factor,
        shape=spec.shape,
        provenance=spec.provenance + (
            {"scale_factor": scale_factor, "family": family, "mean_shift": mean_shift},
        ),
    )
    mutated.validate()
    return mutated


# ---------------------------------------------------------------------------
# Conditioning pairs
# ---------------------------------------------------------------------------


@dataclass
class PairSet:
    """Paired (conditioning, clutter map) grids with a deterministic split.

    ``inputs``: (n, 2, H, W) in [0, 1] - normalized height, landcover/3.
    ``outputs``: (n, 1, H, W) in [0, 1] - compensated log clutter power,
    normalized with the global (lo, hi) stored in ``normalization`` so the
    transform is invertible.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    train_indices: np.ndarray
    val_indices: np.ndarray
    normalization: dict
    meta: dict = field(default_factory=dict)


def polar_clutter_power(scene: TerrainScene, platform: PlatformState,
                        config: RadarConfig, n_range=64, n_azimuth=64,
                        r_min=400.0, r_max=3000.0):
    """Mean clutter power vs (range, azimuth) with an omnidirectional antenna.

    Power per polar cell uses the radar equation with sigma =
    gamma(class) * cell_area * sin(grazing), cell area r * dr * daz.
    Terrain is sampled at the polar cell centers (nearest raster cell).

    Returns (power, height, landcover) arrays shaped (n_range, n_azimuth).
    """
    ranges = r_min + (np.arange(n_range) + 0.5) * (r_max - r_min) / n_range
    azimuths = (np.arange(n_azimuth) + 0.5) * (2.0 * math.pi / n_azimuth)
    r_grid, az_grid = np.meshgrid(ranges, azimuths, indexing="ij")

    alt = platform.height_agl
    ground = np.sqrt(np.maximum(r_grid**2 - alt**2, 0.0))
    d_n = ground * np.cos(az_grid)
    d_e = ground * np.sin(az_grid)

    m_lon = METERS_PER_DEG * math.cos(math.radians(platform.lat))
    lat = platform.lat + d_n / METERS_PER_DEG
    lon = platform.lon + d_e / m_lon

    ny, nx = scene.shape
    iy = np.clip(np.round((lat - scene.origin_lat) * METERS_PER_DEG
                          / scene.cell_size).astype(int), 0, ny - 1)
    ix = np.clip(np.round((lon - scene.origin_lon) * m_lon
                          / scene.cell_size).astype(int), 0, nx - 1)
    height = scene.height[iy, ix].astype(np.float64)
    classes = scene.landcover[iy, ix]

    grazing = np.arctan2(np.maximum(alt - height, 0.0), np.maximum(ground, 1.0))
    gamma_lin = np.array([10.0 ** (BACKSCATTER_DB[k] / 10.0)
                          for k in sorted(BACKSCATTER_DB)])
    dr = (r_max - r_min) / n_range
    daz = 2.0 * math.pi / n_azimuth
    cell_area = r_grid * dr * daz
    sigma = gamma_lin[classes] * cell_area * np.sin(grazing)
    sigma *= 10.0 ** (config.clutter_scale_db / 10.0)

    amp = radar_equation_amplitude(config, 1.0, r_grid, sigma)  # omnidirectional
    return amp**2, height, classes


def _compensate_and_log(power, ranges_sq):
    return np.log10(power * ranges_sq + _TINY_POWER)


def build_pairs(config: RadarConfig, n: int, seed: int,
                terrain_spec: TerrainSpec | None = None,
                grid=(64, 64), r_min=400.0, r_max=3000.0,
                train_fraction=0.6) -> PairSet:
    """Build ``n`` conditioning pairs from fresh random scenes and platforms.

    Each pair gets its own terrain (derived seed) and a platform at a
    random position over the scene interior, 1 km above the mean terrain
    height.  The output normalization (lo, hi) is global over the set.
    """
    if n < 2:
        raise ConfigurationError("need at least 2 pairs to split")
    tspec = terrain_spec or TerrainSpec(nx=96, ny=96, cell_size=70.0)
    n_range, n_az = grid
    ranges = r_min + (np.arange(n_range) + 0.5) * (r_max - r_min) / n_range
    ranges_sq = (ranges**2)[:, None]

    inputs = np.zeros((n, 2, n_range, n_az), dtype=np.float32)
    raw_logs = np.zeros((n, n_range, n_az), dtype=np.float64)
    metas = []
    for i in range(n):
        scene_seed = rtio.derive_seed(seed, "pair-scene", i)
        scn = generate_terrain(scene_seed, tspec)
        rng = rtio.rng_from(seed, "pair-platform", i)
        (lat0, lat1), (lon0, lon1) = scn.latlon_bounds()
        lat = rng.uniform(lat0 + 0.25 * (lat1 - lat0), lat1 - 0.25 * (lat1 - lat0))
        lon = rng.uniform(lon0 + 0.25 * (lon1 - lon0), lon1 - 0.25 * (lon1 - lon0))
        alt = float(scn.height.mean()) + 1000.0
        platform = PlatformState(lat=lat, lon=lon, height_agl=alt,
                                 speed=platform_speed_default(), heading=0.0)
        power, height, classes = polar_clutter_power(
            scn, platform, config, n_range, n_az, r_min, r_max
        )
        h_lo, h_hi = height.min(), height.max()
        inputs[i, 0] = (height - h_lo) / max(h_hi - h_lo, 1e-9)
        inputs[i, 1] = classes / 3.0
        raw_logs[i] = _compensate_and_log(power, ranges_sq)
        metas.append({"scene_seed": scene_seed, "lat": lat, "lon": lon, "alt": alt})

    lo = float(raw_logs.min())
    hi = float(raw_logs.max())
    outputs = ((raw_logs - lo) / max(hi - lo, 1e-9)).astype(np.float32)[:, None]

    order = rtio.rng_from(seed, "pair-split").permutation(n)
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ConfigurationError(f"split leaves an empty side for n={n}")
    normalization = {
        "log_lo": lo, "log_hi": hi, "r_min": r_min, "r_max": r_max,
        "grid": list(grid), "range_compensation": "r_squared",
    }
    return PairSet(
        inputs=inputs,
        outputs=outputs,
        train_indices=np.sort(order[:n_train]),
        val_indices=np.sort(order[n_train:]),
        normalization=normalization,
        meta={"seed": seed, "n": n, "pairs": metas,
              "terrain_spec": asdict(tspec)},
    )


def platform_speed_default() -> float:
    return 100.0


def denormalize_clutter(generated: np.ndarray, normalization: dict) -> np.ndarray:
    """Invert the pair normalization back to linear (uncompensated) power."""
    lo, hi = normalization["log_lo"], normalization["log_hi"]
    n_range = generated.shape[-2]
    r_min, r_max = normalization["r_min"], normalization["r_max"]
    ranges = r_min + (np.arange(n_range) + 0.5) * (r_max - r_min) / n_range
    logs = generated * (hi - lo) + lo
    compensated = 10.0**logs
    return compensated / (ranges**2)[:, None]


def normalize_clutter(power: np.ndarray, normalization: dict) -> np.ndarray:
    """Forward normalization (compensate, log, scale); inverse of
    :func:`denormalize_clutter` up to the [0, 1] clip."""
    n_range = power.shape[-2]
    r_min, r_max = normalization["r_min"], normalization["r_max"]
    ranges = r_min + (np.arange(n_range) + 0.5) * (r_max - r_min) / n_range
    logs = _compensate_and_log(power, (ranges**2)[:, None])
    lo, hi = normalization["log_lo"], normalization["log_hi"]
    return (logs - lo) / max(hi - lo, 1e-9)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


def generator_architecture(in_channels):
    """Conv encoder-decoder, 3 down / 3 up, sigmoid head."""
    del in_channels  # inferred by the network from its input shape
    down = []
    for channels in (16, 32, 64):
        down += [
            {"type": "conv2d", "out_channels": channels, "kernel": 3,
             "stride": 2, "padding": 1},
            {"type": "leaky_relu", "alpha": 0.2},
        ]
    up = []
    for channels in (32, 16, 8):
        up += [
            {"type": "upsample2x"},
            {"type": "conv2d", "out_channels": channels, "kernel": 3,
             "stride": 1, "padding": 1},
            {"type": "relu"},
        ]
    head = [
        {"type": "conv2d", "out_channels": 1, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "sigmoid"},
    ]
    return down + up + head


def discriminator_architecture():
    """Patch-style conditional discriminator on (conditioning, map) stacks."""
    layers = []
    for channels in (16, 32, 64):
        layers += [
            {"type": "conv2d", "out_channels": channels, "kernel": 3,
             "stride": 2, "padding": 1},
            {"type": "leaky_relu", "alpha": 0.2},
        ]
    layers += [
        {"type": "conv2d", "out_channels": 1, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "sigmoid"},
    ]
    return layers


@dataclass
class GeneratorBundle:
    """Trained generator (+ discriminator for diagnostics) and its noise spec."""

    generator: nnet.Network
    discriminator: nnet.Network | None
    noise_spec: NoiseSpec
    normalization: dict
    provenance: dict = field(default_factory=dict)

    @property
    def conditioning_shape(self):
        c, h, w = self.generator.input_shape
        n_noise = self.noise_spec.shape[0]
        return (c - n_noise, h, w)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nnet.save_network(self.generator, directory / "generator.bin")
        if self.discriminator is not None:
            nnet.save_network(self.discriminator, directory / "discriminator.bin")
        rtio.write_json(directory / "bundle.json", {
            "format": "radartwin-ganbundle",
            "version": 1,
            "noise_spec": {
                "family": self.noise_spec.family,
                "mean": self.noise_spec.mean,
                "scale": self.noise_spec.scale,
                "shape": list(self.noise_spec.shape),
                "provenance": list(self.noise_spec.provenance),
            },
            "normalization": self.normalization,
            "provenance": self.provenance,
            "has_discriminator": self.discriminator is not None,
        })

    @classmethod
    def load(cls, directory) -> "GeneratorBundle":
        directory = Path(directory)
        meta = rtio.read_json(directory / "bundle.json")
        if meta.get("format") != "radartwin-ganbundle":
            raise ConfigurationError(f"{directory}: not a generator bundle")
        ns = meta["noise_spec"]
        spec = NoiseSpec(
            family=ns["family"], mean=ns["mean"], scale=ns["scale"],
            shape=tuple(ns["shape"]),
            provenance=tuple(dict(p) for p in ns.get("provenance", [])),
        )
        gen = nnet.load_network(directory / "generator.bin")
        disc = None
        if meta.get("has_discriminator"):
            disc = nnet.load_network(directory / "discriminator.bin")
        return cls(generator=gen, discriminator=disc, noise_spec=spec,
                   normalization=meta["normalization"],
                   provenance=meta.get("provenance", {}))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _gan_input(conditioning, noise):
    return np.concatenate([conditioning, noise], axis=1).astype(np.float32)


def train_cgan(pairs: PairSet, epochs=50, seed=0, lambda_l1=100.0,
               lr=2e-4, batch_size=8, noise_spec: NoiseSpec | None = None,
               adversarial_weight=1.0, d_accuracy_ceiling=0.9) -> GeneratorBundle:
    """Alternating discriminator/generator training.

    Standard conditional-GAN minmax with an L1 term on the generator
    (weight ``lambda_l1``).  The discriminator update is skipped while its
    running accuracy exceeds ``d_accuracy_ceiling``, which keeps the game
    balanced at desk scale.  ``adversarial_weight=0`` reduces the
    generator objective to pure L1 regression.

    Deterministic given ``seed``.  Loss histories for both networks are in
    the bundle provenance.
    """
    x_tr = pairs.inputs[pairs.train_indices]
    y_tr = pairs.outputs[pairs.train_indices]
    if len(x_tr) == 0:
        raise ConfigurationError("training split is empty")
    n, _, h, w = x_tr.shape
    spec = noise_spec or NoiseSpec(shape=(1, h, w))
    spec.validate()

    gen = nnet.Network(generator_architecture(2 + spec.shape[0]),
                       (2 + spec.shape[0], h, w),
                       seed=rtio.derive_seed(seed, "generator"))
    disc = nnet.Network(discriminator_architecture(), (3, h, w),
                        seed=rtio.derive_seed(seed, "discriminator"))
    g_opt = nnet.Adam(lr=lr)
    d_opt = nnet.Adam(lr=lr)

    g_history, d_history = [], []
    d_acc_running = 0.5
    for epoch in range(epochs):
        rng = rtio.rng_from(seed, "gan-epoch", epoch)
        g_total, d_total, count = 0.0, 0.0, 0
        for batch in nnet.training.iter_batches(n, batch_size, rng):
            xb = x_tr[batch]
            yb = y_tr[batch]
            z = np.stack([spec.draw(rng) for _ in range(len(batch))]).astype(np.float32)

            fake = gen.forward(_gan_input(xb, z), training=True)

            # -- discriminator on a combined real/fake batch
            d_in = np.concatenate([
                np.concatenate([xb, yb], axis=1),
                np.concatenate([xb, fake], axis=1),
            ]).astype(np.float32)
            d_target = np.concatenate([
                np.ones((len(batch), 1) + disc.output_shape[1:], dtype=np.float32),
                np.zeros((len(batch), 1) + disc.output_shape[1:], dtype=np.float32),
            ])
            d_out = disc.forward(d_in, training=True)
            d_loss, d_grad = nnet.bce_loss(d_out, d_target)
            correct = np.concatenate([
                (d_out[:len(batch)].mean(axis=(1, 2, 3)) > 0.5),
                (d_out[len(batch):].mean(axis=(1, 2, 3)) <= 0.5),
            ])
            d_acc_running = 0.9 * d_acc_running + 0.1 * float(correct.mean())
            if d_acc_running <= d_accuracy_ceiling:
                disc.backward(d_grad)
                d_opt.step(disc.parameters(), disc.gradients())

            # -- generator: adversarial (through a frozen discriminator) + L1
            fake = gen.forward(_gan_input(xb, z), training=True)
            grad_map = np.zeros_like(fake)
            g_adv = 0.0
            if adversarial_weight > 0:
                d_fake = disc.forward(
                    np.concatenate([xb, fake], axis=1).astype(np.float32),
                    training=True,
                )
                ones = np.ones_like(d_fake)
                g_adv, adv_grad = nnet.bce_loss(d_fake, ones)
                d_input_grad = disc.backward(adv_grad)
                disc.zero_grads()  # frozen for this step
                grad_map += adversarial_weight * d_input_grad[:, 2:3]
            l1, l1_grad = nnet.l1_loss(fake, yb)
            grad_map += lambda_l1 * l1_grad
            gen.backward(grad_map)
            g_opt.step(gen.parameters(), gen.gradients())

            g_loss = adversarial_weight * g_adv + lambda_l1 * l1
            g_total += g_loss * len(batch)
            d_total += d_loss * len(batch)
            count += len(batch)
        g_epoch = g_total / count
        d_epoch = d_total / count
        if not (math.isfinite(g_epoch) and math.isfinite(d_epoch)):
            raise TrainingFailure(
                f"GAN training diverged at epoch {epoch}", epoch
            )
        g_history.append(g_epoch)
        d_history.append(d_epoch)

    return GeneratorBundle(
        generator=gen,
        discriminator=disc,
        noise_spec=spec,
        normalization=dict(pairs.normalization),
        provenance={
            "epochs": epochs,
            "seed": seed,
            "lambda_l1": lambda_l1,
            "adversarial_weight": adversarial_weight,
            "lr": lr,
            "batch_size": batch_size,
            "n_train": int(len(pairs.train_indices)),
            "n_val": int(len(pairs.val_indices)),
            "g_loss": g_history,
            "d_loss": d_history,
        },
    )


def generate_clutter(bundle: GeneratorBundle, conditioning, seed: int):
    """One generator forward pass.

    Returns (map in [0, 1] shaped (H, W), latency seconds).
    """
    cond = np.asarray(conditioning, dtype=np.float32)
    if cond.shape != bundle.conditioning_shape:
        raise ConfigurationError(
            f"conditioning shape {cond.shape} does not match bundle "
            f"{bundle.conditioning_shape}"
        )
    rng = rtio.rng_from(seed, "gan-noise")
    z = bundle.noise_spec.draw(rng).astype(np.float32)
    start = time.perf_counter()
    out = bundle.generator.forward(
        np.concatenate([cond, z], axis=0)[None]
    )
    latency = time.perf_counter() - start
    return out[0, 0].astype(np.float64), latency


def validation_l1(bundle: GeneratorBundle, pairs: PairSet, seed=0) -> float:
    """Mean absolute error on the validation split, normalized units."""
    idx = pairs.val_indices
    total = 0.0
    for j, i in enumerate(idx):
        out, _ = generate_clutter(bundle, pairs.inputs[i],
                                  rtio.derive_seed(seed, "val", int(j)))
        total += float(np.mean(np.abs(out - pairs.outputs[i, 0])))
    return total / len(idx)


def discriminator_accuracy(bundle: GeneratorBundle, pairs: PairSet, seed=0) -> float:
    """Real/fake accuracy on the validation split (mean patch probability,
    0.5 threshold)."""
    if bundle.discriminator is None:
        raise ConfigurationError("bundle has no discriminator")
    idx = pairs.val_indices
    correct = 0
    for j, i in enumerate(idx):
        cond = pairs.inputs[i]
        fake, _ = generate_clutter(bundle, cond,
                                   rtio.derive_seed(seed, "dacc", int(j)))
        d_real = bundle.discriminator.forward(
            np.concatenate([cond, pairs.outputs[i]], axis=0)[None].astype(np.float32)
        )
        d_fake = bundle.discriminator.forward(
            np.concatenate([cond, fake[None]], axis=0)[None].astype(np.float32)
        )
        correct += int(d_real.mean() > 0.5) + int(d_fake.mean() <= 0.5)
    return correct / (2.0 * len(idx))


# ---------------------------------------------------------------------------
# Anomaly injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalySpec:
    """Injected anomaly description.

    kind: ``scatterer_swarm`` (count point scatterers inside ``extent``
    bins of ``center``), ``doppler_streak`` (one range row, ``extent``
    consecutive Doppler bins), or ``ood_noise`` (additive exponential
    noise over the whole map).
    """

    kind: str = "scatterer_swarm"
    count: int = 20
    amplitude: float = 1.0
    extent: int = 8
    placement_seed: int = 0
    center: tuple | None = None  # (range_bin, doppler_bin) or None = random

    def validate(self):
        if self.kind not in ("scatterer_swarm", "doppler_streak", "ood_noise"):
            raise ConfigurationError(f"unknown anomaly kind {self.kind!r}")
        if not math.isfinite(self.amplitude) or self.amplitude < 0:
            raise ConfigurationError("anomaly amplitude must be finite and >= 0")
        if self.count < 0 or self.extent < 0:
            raise ConfigurationError("anomaly count/extent must be >= 0")


def inject_anomaly(rdmap: RDMap, spec: AnomalySpec) -> RDMap:
    """Additive power injection; returns a new map, the input is untouched.

    Placements that would land outside the map are clipped to the edge and
    flagged in the returned metadata (``anomaly_clipped``).
    """
    spec.validate()
    power = rdmap.power.copy()
    n_r, n_d = power.shape
    rng = rtio.rng_from(spec.placement_seed, "anomaly", spec.kind)
    clipped = False

    if spec.kind == "scatterer_swarm" and spec.count > 0:
        if spec.center is None:
            cy = int(rng.integers(0, n_r))
            cx = int(rng.integers(0, n_d))
        else:
            cy, cx = int(round(spec.center[0])), int(round(spec.center[1]))
            if not (0 <= cy < n_r and 0 <= cx < n_d):
                clipped = True
                cy = min(max(cy, 0), n_r - 1)
                cx = min(max(cx, 0), n_d - 1)
        placements = set()
        guard = 0
        while len(placements) < spec.count:
            dy = int(rng.integers(-spec.extent, spec.extent + 1))
            dx = int(rng.integers(-spec.extent, spec.extent + 1))
            y, x = cy + dy, cx + dx
            if not (0 <= y < n_r and 0 <= x < n_d):
                clipped = True
                y = min(max(y, 0), n_r - 1)
                x = min(max(x, 0), n_d - 1)
            placements.add((y, x))
            guard += 1
            if guard > 100 * spec.count + 1000:
                raise ConfigurationError(
                    "could not place a disjoint swarm; extent too small"
                )
        for y, x in sorted(placements):
            power[y, x] += spec.amplitude
    elif spec.kind == "doppler_streak" and spec.extent > 0:
        if spec.center is None:
            row = int(rng.integers(0, n_r))
            col = int(rng.integers(0, n_d))
        else:
            row, col = int(round(spec.center[0])), int(round(spec.center[1]))
            if not (0 <= row < n_r and 0 <= col < n_d):
                clipped = True
                row = min(max(row, 0), n_r - 1)
                col = min(max(col, 0), n_d - 1)
        cols = (col + np.arange(spec.extent)) % n_d
        power[row, cols] += spec.amplitude
    elif spec.kind == "ood_noise":
        power += rng.exponential(spec.amplitude, size=power.shape)

    metadata = dict(rdmap.metadata)
    metadata["anomaly"] = asdict(spec)
    metadata["anomaly_clipped"] = clipped
    return RDMap(power=power, metadata=metadata)


# ---------------------------------------------------------------------------
# Physical admissibility + RD adapter
# ---------------------------------------------------------------------------


def expected_map_power(scene: TerrainScene, config: RadarConfig,
                       platform: PlatformState, window="hann") -> float:
    """Expected total RD-map power for the nominal scene (clutter + noise)."""
    from .rfsim import clutter_components

    _, coef, _ = clutter_components(scene, config, platform, seed=0)
    # expectation over fluctuation/phase: E|c|^2 = amp^2 (E fluct^2 = 1)
    clutter = float(np.sum(np.abs(coef) ** 2))  # includes the drawn fluctuations
    w = np.hanning(config.n_pulses) if window == "hann" else np.ones(config.n_pulses)
    per_pulse = clutter + config.n_range_bins * config.noise_power
    return config.n_pulses / config.n_pulses * float(np.sum(w**2)) * per_pulse


def admissible_power_bound(scene: TerrainScene, config: RadarConfig,
                           platform: PlatformState, margin_db=20.0) -> float:
    """Upper bound on physically plausible total map power."""
    return expected_map_power(scene, config, platform) * 10.0 ** (margin_db / 10.0)


def is_admissible(rdmap: RDMap, bound: float) -> bool:
    return float(rdmap.power.sum()) <= bound


def rd_map_from_generated_clutter(bundle: GeneratorBundle, conditioning,
                                  config: RadarConfig, platform: PlatformState,
                                  seed: int, target_components=None,
                                  window="hann", calibration_total=None):
    """Adapter: generated polar clutter -> RD map in the deployed geometry.

    The generator produces texture on its training polar grid (short
    ranges around a platform over the scene).  The adapter de-normalizes
    it to linear power, stretches the range rings affinely across the
    deployed range window, assigns each azimuth column a Doppler from the
    platform motion, draws speckle, and runs the standard slow-time
    synthesis.  When ``calibration_total`` is given, the clutter power is
    rescaled so its total matches that figure (physical recalibration
    from the generator's training geometry to the deployed one).
    Optional ``target_components`` = (range_bin, coefficient, doppler)
    adds a target return.  Returns (RDMap, generated map in [0, 1]).
    """
    gen_map, _ = generate_clutter(bundle, conditioning, seed)
    power = denormalize_clutter(gen_map, bundle.normalization)
    n_range, n_az = power.shape
    if calibration_total is not None and power.sum() > 0:
        power = power * (calibration_total / power.sum())

    ring_rows = np.floor((np.arange(n_range) + 0.5)
                         * config.n_range_bins / n_range).astype(np.intp)
    bins = np.repeat(ring_rows, n_az)

    azimuths = (np.arange(n_az) + 0.5) * (2.0 * math.pi / n_az)
    heading = math.radians(platform.heading)
    radial = np.cos(azimuths - heading)
    doppler = np.tile(2.0 * platform.speed * radial / config.wavelength, n_range)

    rng = rtio.rng_from(seed, "gan-speckle")
    n_cells = power.size
    fluct = rng.rayleigh(scale=1.0 / math.sqrt(2.0), size=n_cells)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_cells)
    coef = np.sqrt(power.ravel()) * fluct * np.exp(1j * phase)

    slow_time = np.zeros((config.n_range_bins, config.n_pulses), dtype=np.complex128)
    accumulate_slow_time(slow_time, bins, coef, doppler, config.prf)

    if target_components is not None:
        t_bin, t_coef, t_dopp = target_components
        accumulate_slow_time(slow_time, np.array([t_bin]), np.array([t_coef]),
                             np.array([t_dopp]), config.prf)

    if config.noise_power > 0:
        nrng = rtio.rng_from(seed, "gan-noise-floor")
        scale = math.sqrt(config.noise_power / 2.0)
        slow_time += scale * (nrng.standard_normal(slow_time.shape)
                              + 1j * nrng.standard_normal(slow_time.shape))

    rdmap = RDMap(
        power=rd_power(slow_time, window=window),
        metadata={
            "source": "generator",
            "seed": int(seed),
            "config_hash": config.config_hash(),
            "window": window,
        },
    )
    return rdmap, gen_map
