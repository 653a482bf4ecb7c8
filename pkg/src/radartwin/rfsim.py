"""System-under-test digital twin: array pattern, returns, pulse-Doppler maps.

The simulator synthesizes per-range-bin slow-time pulse trains directly
(no fast-time waveform convolution): every ground patch contributes a
complex return with radar-equation amplitude and a Doppler phasor, target
and noise are added, and a windowed DFT over pulses yields the
range-Doppler power map.  Range is handled by binning patches into rings
of width ``range_bin``.  Doppler aliasing happens naturally because the
phasors are sampled at the PRF.

Doppler axis convention: raw DFT order, i.e. column 0 is zero Doppler and
negative Doppler wraps into the upper columns.
"""

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np
from scipy.constants import c as C_LIGHT

from . import io as rtio
from .errors import ConfigurationError
from .scene import (
    BACKSCATTER_DB,
    PlatformState,
    TerrainScene,
    patch_geometry,
    scene_geometry,
)

# Paper-anchored bin widths: 0.0162 nmi range bins, 3.4375 Hz Doppler bins.
RANGE_BIN_M = 30.0
DOPPLER_BIN_HZ = 3.4375
FULL_SCALE_SHAPE = (680, 320)  # paper-scale (range bins, Doppler bins)
DESK_SCALE_SHAPE = (128, 64)

_RADAR_EQ_DENOM = (4.0 * math.pi) ** 3


# ---------------------------------------------------------------------------
# Configuration and sample types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadarConfig:
    """Radar system parameters.

    ``wavelength`` is always ``c / carrier_freq``; ``prf`` is always
    ``doppler_bin * n_pulses`` so the Doppler axis is exact by construction.
    ``element_spacing=None`` means half a wavelength.
    """

    carrier_freq: float = 10.0e9  # Hz
    tx_power: float = 1.0e18  # linear units
    element_spacing: float | None = None  # m; None -> wavelength / 2
    n_horizontal: int = 10
    n_vertical: int = 5
    look_azimuth: float = 0.0  # rad from north
    look_elevation: float = 0.0  # rad, negative below horizon
    n_pulses: int = 64
    n_range_bins: int = 128
    range_bin: float = RANGE_BIN_M  # m
    doppler_bin: float = DOPPLER_BIN_HZ  # Hz
    range_start: float = 0.0  # m, range of the near edge of bin 0
    noise_power: float = 1.0  # linear, per complex sample
    clutter_scale_db: float = 0.0  # clutter power offset (excursion knob)

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.carrier_freq

    @property
    def spacing(self) -> float:
        return self.wavelength / 2.0 if self.element_spacing is None else self.element_spacing

    @property
    def prf(self) -> float:
        return self.doppler_bin * self.n_pulses

    @property
    def cpi(self) -> float:
        """Coherent processing interval [s] = 1 / doppler_bin."""
        return 1.0 / self.doppler_bin

    def validate(self):
        if self.carrier_freq <= 0 or self.tx_power <= 0:
            raise ConfigurationError("carrier_freq and tx_power must be positive")
        if self.n_horizontal < 1 or self.n_vertical < 1:
            raise ConfigurationError("array needs at least one element per dimension")
        # Grating-lobe limit; tiny slack for spacing quoted as a rounded length.
        if self.spacing > self.wavelength / 2.0 * (1.0 + 1e-9):
            raise ConfigurationError(
                f"element spacing {self.spacing} exceeds half wavelength "
                f"{self.wavelength / 2.0}"
            )
        if self.n_pulses < 2 or self.n_range_bins < 1:
            raise ConfigurationError("need n_pulses >= 2 and n_range_bins >= 1")
        if self.range_bin <= 0 or self.doppler_bin <= 0:
            raise ConfigurationError("bin widths must be positive")
        if self.range_start < 0:
            raise ConfigurationError("range_start must be >= 0")
        if self.noise_power < 0:
            raise ConfigurationError("noise_power must be >= 0")
        if not math.isfinite(self.clutter_scale_db):
            raise ConfigurationError("clutter_scale_db must be finite")

    def config_hash(self) -> str:
        return rtio.json_hash(asdict(self))


@dataclass(frozen=True)
class TargetSpec:
    """Ground moving target."""

    lat: float  # deg
    lon: float  # deg
    ground_speed: float  # m/s
    heading: float  # deg true
    rcs: float = 1.0  # m^2, linear

    def validate(self):
        if self.ground_speed < 0:
            raise ConfigurationError("target speed must be >= 0")
        if self.rcs <= 0:
            raise ConfigurationError("target rcs must be positive")

    def velocity_enu(self):
        h = math.radians(self.heading)
        return self.ground_speed * math.sin(h), self.ground_speed * math.cos(h), 0.0


@dataclass
class RDMap:
    """Range-Doppler power map: rows are range bins, columns Doppler bins."""

    power: np.ndarray  # (n_range_bins, n_pulses), linear power
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.power.shape


@dataclass(frozen=True)
class TruthLabel:
    range_bin: int
    doppler_bin: int
    target: TargetSpec

    def as_array(self) -> np.ndarray:
        return np.array([self.range_bin, self.doppler_bin], dtype=np.float64)


# ---------------------------------------------------------------------------
# Array pattern
# ---------------------------------------------------------------------------


def array_gain(config: RadarConfig, azimuth, elevation):
    """Steered uniform-rectangular-array power gain.

    Separable pattern |AF_h(az)|^2 * |AF_v(el)|^2 with the coherent sum
    evaluated explicitly, so boresight gain is exactly
    ``(n_horizontal * n_vertical)**2``.  Accepts scalars or arrays.
    """
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    k_d = 2.0 * math.pi * config.spacing / config.wavelength

    def af_power(theta, theta0, n):
        psi = k_d * (np.sin(theta) - math.sin(theta0))
        phases = np.multiply.outer(np.arange(n), psi)
        af = np.exp(1j * phases).sum(axis=0)
        return np.abs(af) ** 2

    gain = af_power(az, config.look_azimuth, config.n_horizontal) * af_power(
        el, config.look_elevation, config.n_vertical
    )
    if np.isscalar(azimuth) and np.isscalar(elevation):
        return float(gain)
    return gain


def azimuth_beamwidth_3db(config: RadarConfig, scan_halfwidth=math.radians(45.0)) -> float:
    """Measured 3 dB azimuth beamwidth [rad] by numeric pattern scan.

    Bisects |AF|^2 = peak/2 on each side of the look azimuth.
    """
    peak = array_gain(config, config.look_azimuth, config.look_elevation)
    half = peak / 2.0

    def gain_at(az):
        return array_gain(config, az, config.look_elevation)

    def edge(direction):
        lo = config.look_azimuth
        step = 1e-4
        hi = lo + direction * step
        while gain_at(hi) > half:
            step *= 2.0
            hi = lo + direction * step
            if step > scan_halfwidth:
                raise ConfigurationError("3 dB point not found inside the scan window")
        a, b = lo, hi
        for _ in range(60):
            mid = 0.5 * (a + b)
            if gain_at(mid) > half:
                a = mid
            else:
                b = mid
        return 0.5 * (a + b)

    return abs(edge(+1) - edge(-1))


# ---------------------------------------------------------------------------
# Slow-time synthesis
# ---------------------------------------------------------------------------


def radar_equation_amplitude(config: RadarConfig, gain, slant_range, rcs):
    """Return amplitude sqrt(P_t G^2 lambda^2 sigma / ((4 pi)^3 R^4))."""
    lam = config.wavelength
    power = (
        config.tx_power * np.asarray(gain) ** 2 * lam**2 * np.asarray(rcs)
        / (_RADAR_EQ_DENOM * np.asarray(slant_range) ** 4)
    )
    return np.sqrt(power)


def accumulate_slow_time(slow_time: np.ndarray, bins, coefficients, dopplers,
                         prf: float):
    """Add phasor trains ``coef * exp(j 2 pi f m / prf)`` into range-bin rows.

    Accumulation order is fixed (stable sort by bin, original order within a
    bin) so results are bit-identical regardless of caller parallelism.
    """
    bins = np.asarray(bins, dtype=np.intp)
    coefficients = np.asarray(coefficients, dtype=np.complex128)
    dopplers = np.asarray(dopplers, dtype=np.float64)
    if bins.size == 0:
        return slow_time
    n_pulses = slow_time.shape[1]
    m = np.arange(n_pulses, dtype=np.float64)
    order = np.argsort(bins, kind="stable")
    bins_sorted = bins[order]
    phasors = coefficients[order, None] * np.exp(
        1j * (2.0 * math.pi / prf) * np.outer(dopplers[order], m)
    )
    starts = np.flatnonzero(np.r_[True, bins_sorted[1:] != bins_sorted[:-1]])
    sums = np.add.reduceat(phasors, starts, axis=0)
    slow_time[bins_sorted[starts]] += sums
    return slow_time


def clutter_components(scene: TerrainScene, config: RadarConfig,
                       platform: PlatformState, seed: int,
                       gamma_db=None):
    """Per-patch (range bin, complex coefficient, Doppler) for all scene cells.

    The random draws (Rayleigh amplitude fluctuation, uniform phase) cover
    every cell before range-window masking, so the same seed gives the same
    per-patch realization for any range window or clutter scale.
    """
    geom = scene_geometry(platform, scene)
    rng = rtio.rng_from(seed, "clutter")
    n_cells = scene.height.size

    fluct = rng.rayleigh(scale=1.0 / math.sqrt(2.0), size=n_cells)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_cells)

    slant = geom["slant_range"].ravel()
    bins = np.floor((slant - config.range_start) / config.range_bin).astype(np.intp)
    mask = (bins >= 0) & (bins < config.n_range_bins)

    gtable = BACKSCATTER_DB if gamma_db is None else gamma_db
    gamma_lin = np.array([10.0 ** (gtable[k] / 10.0) for k in sorted(gtable)])
    patch_area = scene.cell_size**2
    sigma = (
        gamma_lin[scene.landcover.ravel()]
        * patch_area
        * np.sin(geom["grazing"].ravel())
        * 10.0 ** (config.clutter_scale_db / 10.0)
    )

    gain = array_gain(config, geom["azimuth"].ravel(), geom["elevation"].ravel())
    amp = radar_equation_amplitude(config, gain, slant, sigma)
    coef = amp * fluct * np.exp(1j * phase)

    # the radial component already folds in the platform heading
    doppler = 2.0 * platform.speed * geom["radial"].ravel() / config.wavelength
    return bins[mask], coef[mask], doppler[mask]


def target_component(scene: TerrainScene, config: RadarConfig,
                     platform: PlatformState, target: TargetSpec, seed: int):
    """(range bin, complex coefficient, Doppler, truth label pieces) for the target."""
    target.validate()
    if not scene.contains(target.lat, target.lon):
        raise ConfigurationError(
            f"target ({target.lat}, {target.lon}) lies outside the scene"
        )
    t_height = scene.height_at(target.lat, target.lon)
    geo = patch_geometry(platform, target.lat, target.lon, t_height)

    bin_idx = int(math.floor((geo.slant_range - config.range_start) / config.range_bin))
    if not (0 <= bin_idx < config.n_range_bins):
        raise ConfigurationError(
            f"target slant range {geo.slant_range:.1f} m outside the range window"
        )

    # Closing speed from the relative velocity projected on the line of sight.
    v_pe, v_pn, _ = platform.velocity_enu()
    v_te, v_tn, _ = target.velocity_enu()
    d_n = (target.lat - platform.lat) * 111_320.0
    d_e = (target.lon - platform.lon) * 111_320.0 * math.cos(math.radians(platform.lat))
    d_u = t_height - platform.height_agl
    u = np.array([d_n, d_e, d_u]) / geo.slant_range
    closing = (v_pn - v_tn) * u[0] + (v_pe - v_te) * u[1]
    doppler = 2.0 * closing / config.wavelength

    gain = array_gain(config, geo.azimuth, geo.elevation)
    amp = float(radar_equation_amplitude(config, gain, geo.slant_range, target.rcs))
    rng = rtio.rng_from(seed, "target")
    coef = amp * np.exp(1j * rng.uniform(0.0, 2.0 * math.pi))
    return bin_idx, coef, doppler


def wrap_doppler(freq: float, prf: float) -> float:
    """Fold a Doppler frequency into [-prf/2, prf/2)."""
    return (freq + prf / 2.0) % prf - prf / 2.0


def doppler_bin_index(freq: float, config: RadarConfig) -> int:
    """Nearest Doppler column (raw DFT order) for a frequency in Hz."""
    wrapped = wrap_doppler(freq, config.prf)
    return int(round(wrapped / config.doppler_bin)) % config.n_pulses


def rd_power(slow_time: np.ndarray, window: str = "hann") -> np.ndarray:
    """Windowed DFT over pulses -> squared magnitude.

    ``window`` is "hann" (symmetric) or "rect".
    """
    n_pulses = slow_time.shape[1]
    if window == "hann":
        w = np.hanning(n_pulses)
    elif window == "rect":
        w = np.ones(n_pulses)
    else:
        raise ConfigurationError(f"unknown window {window!r}")
    spectrum = np.fft.fft(slow_time * w[None, :], axis=1)
    return np.abs(spectrum) ** 2


def simulate_rd_map(scene: TerrainScene, config: RadarConfig,
                    platform: PlatformState, target: TargetSpec | None,
                    seed: int, include_clutter: bool = True,
                    include_noise: bool = True, window: str = "hann",
                    gamma_db=None):
    """Simulate one range-Doppler map.

    Returns
    -------
    (RDMap, TruthLabel or None)
        Deterministic in all inputs; clutter, target, and noise use
        independent seed streams so switching one off does not change the
        draws of the others.
    """
    config.validate()
    platform.validate()
    slow_time = np.zeros((config.n_range_bins, config.n_pulses), dtype=np.complex128)

    if include_clutter:
        bins, coef, dopp = clutter_components(scene, config, platform, seed, gamma_db)
        accumulate_slow_time(slow_time, bins, coef, dopp, config.prf)

    truth = None
    ambiguous = False
    if target is not None:
        t_bin, t_coef, t_dopp = target_component(scene, config, platform, target, seed)
        accumulate_slow_time(
            slow_time, np.array([t_bin]), np.array([t_coef]), np.array([t_dopp]),
            config.prf,
        )
        wrapped = wrap_doppler(t_dopp, config.prf)
        ambiguous = abs(wrapped - t_dopp) > 1e-9
        truth = TruthLabel(
            range_bin=t_bin,
            doppler_bin=doppler_bin_index(t_dopp, config),
            target=target,
        )

    if include_noise and config.noise_power > 0:
        rng = rtio.rng_from(seed, "noise")
        scale = math.sqrt(config.noise_power / 2.0)
        shape = slow_time.shape
        slow_time += scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))

    power = rd_power(slow_time, window=window)
    rdmap = RDMap(
        power=power,
        metadata={
            "config_hash": config.config_hash(),
            "seed": int(seed),
            "window": window,
            "doppler_ambiguous": bool(ambiguous),
            "clutter_scale_db": config.clutter_scale_db,
            "range_start": config.range_start,
            "range_bin": config.range_bin,
            "doppler_bin": config.doppler_bin,
        },
    )
    return rdmap, truth


def perturb_clutter(config: RadarConfig, delta_db: float) -> RadarConfig:
    """Scale every patch's scattered power by ``10**(delta_db/10)``.

    Target and noise power are untouched; returns a new config.
    """
    if not math.isfinite(delta_db):
        raise ConfigurationError("delta_db must be finite")
    return replace(config, clutter_scale_db=config.clutter_scale_db + delta_db)


# ---------------------------------------------------------------------------
# Map files: raw little-endian float32 + JSON sidecar
# ---------------------------------------------------------------------------


def save_rd_map(rdmap: RDMap, truth: TruthLabel | None, path_base) -> dict:
    """Write ``<base>.f32`` + ``<base>.json``; returns the sidecar dict."""
    from pathlib import Path

    base = Path(path_base)
    data_hash = rtio.write_raw_array(base.with_suffix(".f32"), rdmap.power, np.float32)
    sidecar = {
        "format": "radartwin-rdmap",
        "version": 1,
        "rows_range_bins": int(rdmap.power.shape[0]),
        "cols_doppler_bins": int(rdmap.power.shape[1]),
        "data": {"file": base.with_suffix(".f32").name, "dtype": "float32",
                 "sha256": data_hash},
        "metadata": rdmap.metadata,
        "truth": None if truth is None else {
            "range_bin": truth.range_bin,
            "doppler_bin": truth.doppler_bin,
            "target": asdict(truth.target),
        },
    }
    rtio.write_json(base.with_suffix(".json"), sidecar)
    return sidecar


def load_rd_map(path_base):
    """Load a map written by :func:`save_rd_map` -> (RDMap, TruthLabel or None)."""
    from pathlib import Path

    base = Path(path_base)
    sidecar = rtio.read_json(base.with_suffix(".json"))
    shape = (sidecar["rows_range_bins"], sidecar["cols_doppler_bins"])
    power = rtio.read_raw_array(base.parent / sidecar["data"]["file"], shape, np.float32)
    rdmap = RDMap(power=power.astype(np.float64), metadata=sidecar.get("metadata", {}))
    truth = None
    if sidecar.get("truth"):
        t = sidecar["truth"]
        truth = TruthLabel(
            range_bin=int(t["range_bin"]),
            doppler_bin=int(t["doppler_bin"]),
            target=TargetSpec(**t["target"]),
        )
    return rdmap, truth
