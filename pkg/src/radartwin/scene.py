"""Environment digital twin: synthetic terrain and platform-to-patch geometry.

The scene is a regular lat/lon raster of elevation and landcover class,
generated from seeded spectral noise so any scene is reproducible from
(seed, spec) alone.  Geometry uses a flat-earth local tangent plane; at
desk scale (<= 25 km) curvature contributes < 0.05 % of slant range.

Grid layout: ``height[iy, ix]`` with row 0 the southernmost row and
column 0 the westernmost column.  Files are written row-major in that
order (see :func:`save_scene`).
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigurationError, GeometryError
from . import io as rtio

# Meters per degree of latitude on the local tangent plane; longitude is
# scaled by cos(latitude).
METERS_PER_DEG = 111_320.0

# Landcover class ids
WATER, GRASS, FOREST, URBAN = 0, 1, 2, 3
CLASS_NAMES = {WATER: "water", GRASS: "grass", FOREST: "forest", URBAN: "urban"}

# Default per-class backscatter coefficient gamma [dB] (repo constants).
BACKSCATTER_DB = {WATER: -35.0, GRASS: -20.0, FOREST: -15.0, URBAN: -8.0}


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TerrainSpec:
    """Parameters for :func:`generate_terrain`.

    Thresholds: ``water_level`` is an absolute height [m]; cells below it
    become water.  ``moisture_urban`` / ``moisture_forest`` split the
    remaining cells on a second noise field in [0, 1] and must be ordered
    ``moisture_urban < moisture_forest``.
    """

    nx: int = 96
    ny: int = 96
    cell_size: float = 62.5  # m
    center_lat: float = 32.5505  # deg
    center_lon: float = -117.0493  # deg
    height_base: float = 0.0  # m, minimum terrain height
    height_range: float = 120.0  # m, peak-to-base span
    water_level: float = 18.0  # m absolute
    moisture_urban: float = 0.25
    moisture_forest: float = 0.70
    spectral_beta: float = 2.2  # power-law exponent of the height spectrum

    def validate(self):
        if self.nx < 8 or self.ny < 8:
            raise ConfigurationError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")
        if not (0.0 <= self.moisture_urban < self.moisture_forest <= 1.0):
            raise ConfigurationError(
                "moisture thresholds must satisfy 0 <= urban < forest <= 1, got "
                f"{self.moisture_urban} / {self.moisture_forest}"
            )
        if self.height_range < 0:
            raise ConfigurationError("height_range must be non-negative")


@dataclass
class TerrainScene:
    """Elevation + landcover raster with its geographic anchoring.

    ``origin_lat``/``origin_lon`` locate the center of cell (0, 0), the
    southwest corner cell.
    """

    origin_lat: float
    origin_lon: float
    cell_size: float  # m
    height: np.ndarray  # (ny, nx) float32, meters
    landcover: np.ndarray  # (ny, nx) uint8 class ids
    seed: int = 0
    spec: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.height.shape

    @property
    def extent(self):
        """(east extent, north extent) in meters."""
        ny, nx = self.height.shape
        return nx * self.cell_size, ny * self.cell_size

    @property
    def center_latlon(self):
        ny, nx = self.height.shape
        lat = self.origin_lat + (ny - 1) / 2.0 * self.cell_size / METERS_PER_DEG
        lon = self.origin_lon + (nx - 1) / 2.0 * self.cell_size / (
            METERS_PER_DEG * math.cos(math.radians(self.origin_lat))
        )
        return lat, lon

    def cell_latlon(self):
        """Per-cell (lat, lon) grids, shape (ny, nx) each."""
        ny, nx = self.height.shape
        m_lon = METERS_PER_DEG * math.cos(math.radians(self.origin_lat))
        lat = self.origin_lat + np.arange(ny)[:, None] * self.cell_size / METERS_PER_DEG
        lon = self.origin_lon + np.arange(nx)[None, :] * self.cell_size / m_lon
        return np.broadcast_to(lat, (ny, nx)).copy(), np.broadcast_to(lon, (ny, nx)).copy()

    def latlon_bounds(self):
        """((lat_min, lat_max), (lon_min, lon_max)) of cell centers."""
        lat, lon = self.cell_latlon()
        return (float(lat.min()), float(lat.max())), (float(lon.min()), float(lon.max()))

    def contains(self, lat: float, lon: float) -> bool:
        (lat0, lat1), (lon0, lon1) = self.latlon_bounds()
        return lat0 <= lat <= lat1 and lon0 <= lon <= lon1

    def height_at(self, lat: float, lon: float) -> float:
        """Height of the cell containing (lat, lon); nearest cell if outside."""
        ny, nx = self.height.shape
        m_lon = METERS_PER_DEG * math.cos(math.radians(self.origin_lat))
        iy = int(round((lat - self.origin_lat) * METERS_PER_DEG / self.cell_size))
        ix = int(round((lon - self.origin_lon) * m_lon / self.cell_size))
        iy = min(max(iy, 0), ny - 1)
        ix = min(max(ix, 0), nx - 1)
        return float(self.height[iy, ix])


@dataclass(frozen=True)
class PlatformState:
    """Radar platform kinematic state (level flight)."""

    lat: float  # deg
    lon: float  # deg
    height_agl: float  # m above the (sea-level) reference plane
    speed: float  # m/s
    heading: float  # deg true, 0 = north

    def validate(self):
        if self.speed < 0:
            raise ConfigurationError("platform speed must be >= 0")
        if self.height_agl <= 0:
            raise ConfigurationError("platform height must be > 0")

    def velocity_enu(self):
        """(v_east, v_north, v_up) in m/s."""
        h = math.radians(self.heading)
        return self.speed * math.sin(h), self.speed * math.cos(h), 0.0


@dataclass(frozen=True)
class PatchGeometry:
    """Line-of-sight geometry from the platform to one ground patch."""

    slant_range: float  # m
    azimuth: float  # rad, 0 = north, positive toward east
    elevation: float  # rad, negative below the horizon
    grazing_angle: float  # rad in [0, pi/2]
    radial_component: float  # cos(angle between velocity and line of sight)


# ---------------------------------------------------------------------------
# Terrain synthesis
# ---------------------------------------------------------------------------


def _spectral_field(rng: np.random.Generator, ny: int, nx: int, beta: float) -> np.ndarray:
    """Zero-mean fractal field via power-law filtered white noise, scaled to [0, 1]."""
    white = rng.normal(size=(ny, nx))
    spectrum = np.fft.fft2(white)
    ky = np.fft.fftfreq(ny)[:, None]
    kx = np.fft.fftfreq(nx)[None, :]
    k = np.hypot(ky, kx)
    k[0, 0] = np.inf  # kill the DC term
    spectrum *= k ** (-beta / 2.0)
    fieldr = np.real(np.fft.ifft2(spectrum))
    lo, hi = fieldr.min(), fieldr.max()
    if hi == lo:
        return np.zeros((ny, nx))
    return (fieldr - lo) / (hi - lo)


def generate_terrain(seed: int, spec: TerrainSpec = TerrainSpec()) -> TerrainScene:
    """Generate a deterministic synthetic scene.

    Heights come from a power-law (fractal) spectrum; landcover combines the
    height field with an independent moisture field: cells below
    ``water_level`` are water, the rest split into urban / grass / forest by
    moisture thresholds.

    Parameters
    ----------
    seed : int
        Full determinism: the same (seed, spec) is bit-identical.
    spec : TerrainSpec

    Returns
    -------
    TerrainScene
    """
    spec.validate()
    rng = rtio.rng_from(seed, "terrain")
    elev01 = _spectral_field(rng, spec.ny, spec.nx, spec.spectral_beta)
    moisture = _spectral_field(rng, spec.ny, spec.nx, spec.spectral_beta)

    height = (spec.height_base + spec.height_range * elev01).astype(np.float32)

    landcover = np.full((spec.ny, spec.nx), GRASS, dtype=np.uint8)
    landcover[moisture >= spec.moisture_forest] = FOREST
    landcover[moisture <= spec.moisture_urban] = URBAN
    landcover[height < spec.water_level] = WATER

    m_lon = METERS_PER_DEG * math.cos(math.radians(spec.center_lat))
    origin_lat = spec.center_lat - (spec.ny - 1) / 2.0 * spec.cell_size / METERS_PER_DEG
    origin_lon = spec.center_lon - (spec.nx - 1) / 2.0 * spec.cell_size / m_lon

    return TerrainScene(
        origin_lat=origin_lat,
        origin_lon=origin_lon,
        cell_size=spec.cell_size,
        height=height,
        landcover=landcover,
        seed=seed,
        spec=asdict(spec),
    )


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def patch_geometry(platform: PlatformState, lat: float, lon: float,
                   height: float = 0.0) -> PatchGeometry:
    """Geometry from the platform to a single patch center.

    Flat-earth tangent frame anchored at the platform: north offset is
    ``dlat * 111320``, east offset ``dlon * 111320 * cos(platform lat)``.

    Raises
    ------
    GeometryError
        If the patch coincides with the platform.
    """
    d_n = (lat - platform.lat) * METERS_PER_DEG
    d_e = (lon - platform.lon) * METERS_PER_DEG * math.cos(math.radians(platform.lat))
    d_u = height - platform.height_agl

    slant = math.sqrt(d_n * d_n + d_e * d_e + d_u * d_u)
    if slant == 0.0:
        raise GeometryError("patch coincides with the platform position")

    ground = math.hypot(d_n, d_e)
    azimuth = math.atan2(d_e, d_n)
    elevation = math.atan2(d_u, ground)
    grazing = min(max(math.atan2(-d_u, ground) if ground > 0 else math.pi / 2, 0.0),
                  math.pi / 2)

    h = math.radians(platform.heading)
    radial = (math.cos(h) * d_n + math.sin(h) * d_e) / slant
    return PatchGeometry(slant, azimuth, elevation, grazing, radial)


def scene_geometry(platform: PlatformState, scene: TerrainScene):
    """Vectorized :func:`patch_geometry` for every scene cell.

    Returns
    -------
    dict of arrays, each shaped (ny, nx): ``slant_range``, ``azimuth``,
    ``elevation``, ``grazing``, ``radial`` plus the ``lat`` / ``lon`` grids.
    """
    lat, lon = scene.cell_latlon()
    d_n = (lat - platform.lat) * METERS_PER_DEG
    d_e = (lon - platform.lon) * METERS_PER_DEG * math.cos(math.radians(platform.lat))
    d_u = scene.height.astype(np.float64) - platform.height_agl

    ground = np.hypot(d_n, d_e)
    slant = np.sqrt(ground**2 + d_u**2)
    if np.any(slant == 0):
        raise GeometryError("a scene cell coincides with the platform position")

    azimuth = np.arctan2(d_e, d_n)
    elevation = np.arctan2(d_u, ground)
    # Treat the nadir cell (ground == 0) as grazing pi/2.
    with np.errstate(invalid="ignore"):
        grazing = np.arctan2(-d_u, ground)
    grazing = np.clip(grazing, 0.0, math.pi / 2)
    grazing[ground == 0] = math.pi / 2

    h = math.radians(platform.heading)
    radial = (math.cos(h) * d_n + math.sin(h) * d_e) / slant
    return {
        "slant_range": slant,
        "azimuth": azimuth,
        "elevation": elevation,
        "grazing": grazing,
        "radial": radial,
        "lat": lat,
        "lon": lon,
    }


# ---------------------------------------------------------------------------
# Scene files: manifest JSON + raw float32 heights + raw uint8 classes
# ---------------------------------------------------------------------------


def save_scene(scene: TerrainScene, directory) -> dict:
    """Write ``scene.json`` + ``heights.f32`` + ``landcover.u8``; returns manifest."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h_hash = rtio.write_raw_array(directory / "heights.f32", scene.height, np.float32)
    c_hash = rtio.write_raw_array(directory / "landcover.u8", scene.landcover, np.uint8)
    ny, nx = scene.shape
    manifest = {
        "format": "radartwin-scene",
        "version": 1,
        "ny": ny,
        "nx": nx,
        "cell_size": scene.cell_size,
        "origin_lat": scene.origin_lat,
        "origin_lon": scene.origin_lon,
        "seed": scene.seed,
        "spec": scene.spec,
        "heights": {"file": "heights.f32", "dtype": "float32", "sha256": h_hash},
        "landcover": {"file": "landcover.u8", "dtype": "uint8", "sha256": c_hash},
    }
    rtio.write_json(directory / "scene.json", manifest)
    return manifest


def load_scene(directory) -> TerrainScene:
    """Load a scene written by :func:`save_scene` (also the import hook for
    externally produced rasters in the same format)."""
    from pathlib import Path

    directory = Path(directory)
    manifest = rtio.read_json(directory / "scene.json")
    if manifest.get("format") != "radartwin-scene":
        raise ConfigurationError(f"{directory}: not a scene directory")
    ny, nx = manifest["ny"], manifest["nx"]
    height = rtio.read_raw_array(directory / manifest["heights"]["file"], (ny, nx), np.float32)
    landcover = rtio.read_raw_array(directory / manifest["landcover"]["file"], (ny, nx), np.uint8)
    if not np.all(np.isfinite(height)):
        raise ConfigurationError("imported heights contain non-finite values")
    if landcover.max() > URBAN:
        raise ConfigurationError("imported landcover contains unknown class ids")
    return TerrainScene(
        origin_lat=manifest["origin_lat"],
        origin_lon=manifest["origin_lon"],
        cell_size=manifest["cell_size"],
        height=height,
        landcover=landcover,
        seed=manifest.get("seed", 0),
        spec=manifest.get("spec", {}),
    )
