"""Synthetic scene generation.

Radiance is rendered with the direct-sun / diffuse-sky / indirect-sun
mixing model; apparent reflectance is then derived with a flat white
calibration panel, which is how the baselines see the scene. Illumination
spectra come from a small parametric model (5778 K blackbody with a
Rayleigh-type optical depth) rather than a full radiative transfer code.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datamodel import (
    AbundanceMap,
    CubeKind,
    DataError,
    EndmemberLibrary,
    IlluminationGeometry,
    IlluminationSpectra,
    SpectralCube,
    SunPosition,
    SurfaceModel,
    load_cube,
    load_endmembers,
    load_surface,
    save_cube,
    save_endmembers,
    save_surface,
)
from .geometry import DEFAULT_AZIMUTHS, illumination_geometry

__all__ = [
    "SceneSpec",
    "SimulatedScene",
    "solar_spectra",
    "render_radiance",
    "add_noise",
    "measured_snr_db",
    "calibration_reflectance",
    "default_endmembers",
    "sim1_surface",
    "make_sim1",
    "write_scene",
    "read_scene",
]

SUN_TEMPERATURE_K = 5778.0
RAYLEIGH_DEPTH_550 = 0.1
DIFFUSE_FRACTION = 0.3
SIM1_SIZE = 70
SIM1_WAVELENGTHS = np.linspace(400.0, 1000.0, 100)
SIM1_CLASSES = ("soil", "building", "tree")
SIM1_CALIBRATION_PIXELS = 25
SIM1_CALIBRATION_CLASS = "tree"

_H = 6.62607015e-34
_C = 2.99792458e8
_KB = 1.380649e-23
_WIEN = 2.897771955e-3


def _planck(wavelength_nm, temperature):
    lam = np.asarray(wavelength_nm, dtype=np.float64) * 1e-9
    return 1.0 / (lam**5 * np.expm1(_H * _C / (lam * _KB * temperature)))


def solar_spectra(sun: SunPosition, wavelengths, *, rayleigh_depth=RAYLEIGH_DEPTH_550,
                  diffuse_fraction=DIFFUSE_FRACTION) -> IlluminationSpectra:
    """Direct and diffuse irradiance spectra for a clear sky.

    ``s1 = E0 exp(-tau m)`` and ``s2 = c_d E0 (1 - exp(-tau))`` with E0 a
    blackbody normalized to its peak, ``tau = k (lambda / 550)^-4`` and air
    mass ``m = 1 / cos(zenith)``.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    if np.any(wl < 350) or np.any(wl > 2500):
        raise DataError("wavelengths must lie in [350, 2500] nm")
    if not sun.zenith < 90:
        raise DataError("zenith must be below 90 degrees")
    e0 = _planck(wl, SUN_TEMPERATURE_K) / _planck(_WIEN / SUN_TEMPERATURE_K * 1e9, SUN_TEMPERATURE_K)
    tau = rayleigh_depth * (wl / 550.0) ** -4
    air_mass = 1.0 / math.cos(math.radians(sun.zenith))
    s1 = e0 * np.exp(-tau * air_mass)
    s2 = diffuse_fraction * e0 * -np.expm1(-tau)
    return IlluminationSpectra(s1, s2, wl)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    dsm: SurfaceModel
    sun: SunPosition
    endmembers: EndmemberLibrary
    abundances: AbundanceMap
    e: float = 0.01
    snr_db: float = 50.0

    def __post_init__(self):
        if not (self.e >= 0 and math.isfinite(self.e)):
            raise DataError("indirect coefficient e must be finite and >= 0")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise DataError("snr_db must be finite (or +inf for no noise)")
        a = self.abundances.fractions
        if not np.all((a == 0) | (a == 1)) or not np.all(a.sum(axis=0) == 1):
            raise DataError("scene abundances must be binary with one class per pixel")
        if (self.abundances.height, self.abundances.width) != (self.dsm.height, self.dsm.width):
            raise DataError("abundance map and DSM dimensions differ")
        if self.abundances.n_classes != self.endmembers.n_classes:
            raise DataError("abundance map and endmember library class counts differ")


def render_radiance(spec: SceneSpec, geom: IlluminationGeometry, spectra: IlluminationSpectra) -> SpectralCube:
    """Noiseless at-sensor radiance for every pixel of ``spec``.

    Shaded pixels (``v = 0``) receive indirect sunlight ``e * sum_j m_j * s1``
    from every class; sunlit pixels receive none.
    """
    M = spec.endmembers.matrix
    A = spec.abundances.fractions
    if geom.shape != (spec.abundances.height, spec.abundances.width):
        raise DataError("geometry and abundance dimensions differ")
    if spectra.bands != M.shape[0]:
        raise DataError("spectra and endmember band counts differ")
    v = geom.v.ravel().astype(np.float64)
    f = geom.f.ravel()
    cos = geom.cos_theta.ravel()
    s1, s2 = spectra.s1[:, None], spectra.s2[:, None]
    illum = s1 * (v * cos)[None, :] + s2 * f[None, :]
    e = np.where(v == 0, spec.e, 0.0)
    indirect = s1 * (M @ np.broadcast_to(e, A.shape))
    radiance = (M @ A) * (illum + indirect)
    return SpectralCube.from_pixels(radiance, spec.abundances.height, spec.abundances.width,
                                    spec.endmembers.wavelengths, CubeKind.RADIANCE)


def _pixel_stream(seed: int, pixel: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(pixel)])))


def add_noise(cube: SpectralCube, snr_db: float, seed: int) -> SpectralCube:
    """Additive zero-mean Gaussian noise at the requested SNR.

    The noise variance is the mean signal power divided by ``10^(snr/10)``.
    Every pixel draws from its own counter-based stream keyed on
    ``(seed, pixel index)``, so the result does not depend on traversal order.
    """
    if math.isnan(snr_db):
        raise DataError("snr_db must not be NaN")
    if snr_db == math.inf:
        return cube
    pixels = cube.pixels()
    power = float(np.mean(pixels * pixels))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = np.empty_like(pixels)
    for p in range(pixels.shape[1]):
        noise[:, p] = _pixel_stream(seed, p).standard_normal(pixels.shape[0])
    return SpectralCube.from_pixels(pixels + sigma * noise, cube.height, cube.width,
                                    cube.wavelengths, cube.kind, cube.band_names)


def measured_snr_db(clean: SpectralCube, noisy: SpectralCube) -> float:
    signal = clean.pixels()
    err = noisy.pixels() - signal
    return 10.0 * math.log10(float(np.mean(signal * signal)) / float(np.mean(err * err)))


def calibration_reflectance(cube: SpectralCube, spectra: IlluminationSpectra, cos_theta_c: float) -> SpectralCube:
    """Apparent reflectance ``y = l / (s1 cos(theta_c) + s2)`` from a flat white panel.

    Negative values (noise in near-dark bands) are clipped to zero so the
    product satisfies the reflectance invariants.
    """
    if cube.kind != CubeKind.RADIANCE:
        raise DataError(f"calibration needs a radiance cube, got {cube.kind.value}")
    panel = spectra.s1 * cos_theta_c + spectra.s2
    if np.any(panel <= 0):
        raise DataError("calibration panel radiance must be strictly positive in every band")
    y = np.maximum(cube.pixels() / panel[:, None], 0.0)
    return SpectralCube.from_pixels(y, cube.height, cube.width, cube.wavelengths,
                                    CubeKind.APPARENT_REFLECTANCE)


def default_endmembers(wavelengths=SIM1_WAVELENGTHS) -> EndmemberLibrary:
    """Three smooth synthetic spectra standing in for soil, a roof and tree canopy."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    x = (wl - 400.0) / 600.0
    soil = 0.06 + 0.22 * np.clip(x, 0, None) ** 0.8
    building = 0.28 + 0.05 * x + 0.015 * np.sin(2 * np.pi * x)
    tree = (0.04 + 0.05 * np.exp(-(((wl - 550.0) / 35.0) ** 2))
            + 0.41 / (1.0 + np.exp(-(wl - 715.0) / 15.0)))
    return EndmemberLibrary(np.column_stack([soil, building, tree]), SIM1_CLASSES, wl)


def sim1_surface(size: int = SIM1_SIZE) -> tuple[SurfaceModel, np.ndarray]:
    """Procedural DSM and class map for the three-region scene.

    A tree canopy (crowns of varying height over a 5 m base) covers the
    northern half; an 18 m flat-roofed building sits against its southern
    edge with a hedge along its east side, and the rest is bare soil at 0 m.
    With the default sun every cast shadow lands on roof or canopy. Returns ``(dsm, labels)`` with labels
    indexing :data:`SIM1_CLASSES`.
    """
    rng = np.random.default_rng(20170)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / 70.0
    labels = np.zeros((size, size), dtype=np.int64)

    # cast shadows fall on canopy: the building abuts the tree block to its
    # north and a hedge covers the strip its shadow reaches to the east
    tree_mask = (rows <= 37 * scale) | ((rows <= 57 * scale) & (cols >= 34 * scale) & (cols <= 39 * scale))
    canopy = np.full((size, size), 5.0)
    crowns = np.zeros((size, size))
    for _ in range(28):
        r0, c0 = rng.uniform(0, 37 * scale), rng.uniform(0, size)
        radius = rng.uniform(3.0, 5.0)
        height = rng.uniform(2.5, 6.0)
        d2 = ((rows - r0) ** 2 + (cols - c0) ** 2) / radius**2
        crowns = np.maximum(crowns, height * np.sqrt(np.clip(1.0 - d2, 0.0, None)))
    canopy = ndimage.gaussian_filter(canopy + crowns, 0.7)

    building_mask = ((rows >= 38 * scale) & (rows <= 57 * scale)
                     & (cols >= 14 * scale) & (cols <= 33 * scale))
    z = np.zeros((size, size))
    z[tree_mask] = canopy[tree_mask]
    z[building_mask] = 18.0
    labels[building_mask] = 1
    labels[tree_mask] = 2
    return SurfaceModel(z, 1.0), labels


@dataclass(frozen=True, eq=False)
class SimulatedScene:
    spec: SceneSpec
    geometry: IlluminationGeometry
    spectra: IlluminationSpectra
    radiance_clean: SpectralCube
    radiance: SpectralCube
    reflectance: SpectralCube
    truth_reflectance: SpectralCube
    calibration_pixels: np.ndarray
    calibration_class: str
    seed: int

    @property
    def cos_theta_c(self) -> float:
        return math.cos(math.radians(self.spec.sun.zenith))


def select_calibration_pixels(labels, geom: IlluminationGeometry, class_index: int,
                              n: int = SIM1_CALIBRATION_PIXELS) -> np.ndarray:
    """Evenly spaced pixels of one class, half sunlit and half shaded.

    Returns flat pixel indices, sunlit first.
    """
    flat = np.asarray(labels).ravel() == class_index
    v = geom.v.ravel()
    sunlit = np.flatnonzero(flat & (v == 1))
    shaded = np.flatnonzero(flat & (v == 0))
    if sunlit.size == 0 or shaded.size == 0:
        raise DataError("class has no sunlit or no shaded pixels to calibrate on")
    n_shaded = min(shaded.size, n - n // 2)
    n_sunlit = min(sunlit.size, n - n_shaded)

    def spread(idx, k):
        return idx[np.round(np.linspace(0, idx.size - 1, k)).astype(int)]

    return np.concatenate([spread(sunlit, n_sunlit), spread(shaded, n_shaded)])


def make_sim1(*, snr_db: float = 50.0, e: float = 0.01, seed: int = 0,
              zenith: float = 40.0, azimuth: float = 190.0,
              wavelengths=SIM1_WAVELENGTHS, n_azimuths: int = DEFAULT_AZIMUTHS,
              spectra: IlluminationSpectra | None = None) -> SimulatedScene:
    """The 70x70 soil / building / tree scene, rendered and calibrated."""
    dsm, labels = sim1_surface()
    sun = SunPosition(zenith, azimuth)
    lib = default_endmembers(wavelengths)
    fractions = np.zeros((lib.n_classes, labels.size))
    fractions[labels.ravel(), np.arange(labels.size)] = 1.0
    truth = AbundanceMap(fractions, lib.class_names, dsm.height, dsm.width)
    spec = SceneSpec(dsm, sun, lib, truth, e=e, snr_db=snr_db)
    geom = illumination_geometry(dsm, sun, n_azimuths)
    if spectra is None:
        spectra = solar_spectra(sun, lib.wavelengths)
    clean = render_radiance(spec, geom, spectra)
    noisy = add_noise(clean, snr_db, seed)
    cos_c = math.cos(math.radians(zenith))
    reflectance = calibration_reflectance(noisy, spectra, cos_c)
    truth_r = SpectralCube.from_pixels(lib.matrix @ fractions, dsm.height, dsm.width,
                                       lib.wavelengths, CubeKind.REFLECTANCE)
    cal = select_calibration_pixels(labels, geom, lib.index(SIM1_CALIBRATION_CLASS))
    return SimulatedScene(spec, geom, spectra, clean, noisy, reflectance, truth_r, cal, SIM1_CALIBRATION_CLASS, seed)


def write_scene(spec: SceneSpec, directory) -> Path:
    """Write a scene spec as JSON plus its DSM, endmember CSV and abundance cube."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_surface(spec.dsm, directory / "dsm.asc")
    save_endmembers(spec.endmembers, directory / "endmembers.csv")
    save_cube(spec.abundances.to_cube(), directory / "truth_abundance")
    doc = {
        "dsm": "dsm.asc",
        "endmembers": "endmembers.csv",
        "abundances": "truth_abundance.json",
        "sun": {"zenith": spec.sun.zenith, "azimuth": spec.sun.azimuth},
        "e": spec.e,
        "snr_db": spec.snr_db if math.isfinite(spec.snr_db) else "inf",
    }
    path = directory / "scene.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def read_scene(path) -> SceneSpec:
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    snr = doc.get("snr_db", 50.0)
    return SceneSpec(
        dsm=load_surface(base / doc["dsm"]),
        sun=SunPosition(float(doc["sun"]["zenith"]), float(doc["sun"]["azimuth"])),
        endmembers=load_endmembers(base / doc["endmembers"]),
        abundances=AbundanceMap.from_cube(load_cube(base / doc["abundances"])),
        e=float(doc.get("e", 0.01)),
        snr_db=math.inf if snr == "inf" else float(snr),
    )
