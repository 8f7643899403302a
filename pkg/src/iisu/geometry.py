"""Per-pixel illumination geometry from a digital surface model.

Conventions: row 0 is the northern edge, columns increase eastward, and
vectors are expressed as (east, north, up). Terrain between cell centres is
bilinearly interpolated.

* normals: central differences of elevation (one-sided at the border);
* incidence cosine: ``max(0, n . d_sun)``;
* sun visibility: march toward the sun in half-cell steps and flag the
  pixel as shadowed when the terrain rises above the ray; rays that leave
  the grid are unoccluded;
* sky-view factor: ``mean(cos^2 h_i)`` over equally spaced azimuths, where
  ``h_i`` is the horizon elevation angle found by scanning outward to the
  grid edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datamodel import DataError, IlluminationGeometry, SunPosition, SurfaceModel

__all__ = [
    "NormalField",
    "surface_normals",
    "incident_cosine",
    "sun_visibility",
    "sky_view_factor",
    "illumination_geometry",
    "DEFAULT_AZIMUTHS",
]

DEFAULT_AZIMUTHS = 64
# relative height margin so a ray does not clip the surface it starts on
_CLEARANCE = 1e-9


@dataclass(frozen=True, eq=False)
class NormalField:
    """Unit surface normals, ``vectors[row, col] = (east, north, up)``."""

    vectors: np.ndarray

    @property
    def up(self) -> np.ndarray:
        return self.vectors[..., 2]


def _elevations(dsm: SurfaceModel | np.ndarray) -> tuple[np.ndarray, float]:
    if isinstance(dsm, SurfaceModel):
        return dsm.filled(), dsm.cell_size
    raise TypeError("expected a SurfaceModel")


def surface_normals(dsm: SurfaceModel) -> NormalField:
    z, cs = _elevations(dsm)
    if z.shape[0] < 2 or z.shape[1] < 2:
        raise DataError(f"surface model must be at least 2x2, got {z.shape[0]}x{z.shape[1]}")
    dz_drow, dz_dcol = np.gradient(z, cs)
    dz_deast = dz_dcol
    dz_dnorth = -dz_drow
    n = np.stack([-dz_deast, -dz_dnorth, np.ones_like(z)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return NormalField(n)


def incident_cosine(normals: NormalField, sun: SunPosition) -> np.ndarray:
    cos = normals.vectors @ sun.direction
    return np.clip(cos, 0.0, 1.0)


def _sample(z: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear terrain height at fractional (row, col) and an inside-grid mask."""
    h, w = z.shape
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    vals = ndimage.map_coordinates(z, [rows.ravel(), cols.ravel()], order=1, mode="nearest")
    return vals.reshape(rows.shape), inside


def _march_offsets(azimuth_rad: float, n_steps: int, step_cells: float):
    """Row/col offsets and horizontal distances (in cells) along an azimuth."""
    t = step_cells * np.arange(1, n_steps + 1)
    return -math.cos(azimuth_rad) * t, math.sin(azimuth_rad) * t, t


def sun_visibility(dsm: SurfaceModel, sun: SunPosition) -> np.ndarray:
    """Binary grid, 1 where the direct solar ray reaches the surface point."""
    z, cs = _elevations(dsm)
    h, w = z.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    rise_per_cell = cs / math.tan(math.radians(sun.zenith)) if sun.zenith > 0 else math.inf
    visible = np.ones(z.shape, dtype=bool)
    if sun.zenith == 0:
        return visible.astype(np.uint8)

    z_max = float(z.max())
    margin = _CLEARANCE * max(1.0, float(np.abs(z).max()))
    # the ray clears the whole grid once it rises above the highest cell
    n_needed = int(math.ceil((z_max - z.min()) / rise_per_cell / 0.5)) + 1
    n_diag = int(math.ceil(2 * math.hypot(h, w))) + 1
    dr, dc, t = _march_offsets(math.radians(sun.azimuth), min(n_needed, n_diag), 0.5)

    pending = np.ones(z.shape, dtype=bool)
    for k in range(t.size):
        if not pending.any():
            break
        r = rows[pending] + dr[k]
        c = cols[pending] + dc[k]
        terrain, inside = _sample(z, r, c)
        ray = z[pending] + t[k] * rise_per_cell
        hit = inside & (terrain > ray + margin)
        idx = np.flatnonzero(pending)
        visible.flat[idx[hit]] = False
        # finished: occluded, left the grid, or already above every cell
        done = hit | ~inside | (ray > z_max + margin)
        pending.flat[idx[done]] = False
    return visible.astype(np.uint8)


def sky_view_factor(dsm: SurfaceModel, n_azimuths: int = DEFAULT_AZIMUTHS) -> np.ndarray:
    """Horizon-based sky-view factor in [0, 1] (1 for an unobstructed pixel)."""
    if n_azimuths < 8:
        raise ValueError(f"n_azimuths must be >= 8, got {n_azimuths}")
    z, cs = _elevations(dsm)
    h, w = z.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    rows, cols, z0 = rows.ravel(), cols.ravel(), z.ravel()
    z_max = float(z.max())
    n_steps = int(math.ceil(2 * math.hypot(h, w))) + 1
    acc = np.zeros(z0.size)
    for i in range(n_azimuths):
        az = 2 * math.pi * i / n_azimuths
        dr, dc, t = _march_offsets(az, n_steps, 0.5)
        tan_h = np.zeros(z0.size)
        for k in range(n_steps):
            dist = t[k] * cs
            # no farther sample can raise any horizon above its current value
            if np.all((z_max - z0) / dist <= tan_h):
                break
            terrain, inside = _sample(z, rows + dr[k], cols + dc[k])
            if not inside.any():
                break
            slope = np.where(inside, (terrain - z0) / dist, 0.0)
            np.maximum(tan_h, slope, out=tan_h)
        # cos^2(atan(x)) = 1 / (1 + x^2)
        acc += 1.0 / (1.0 + tan_h * tan_h)
    return np.clip((acc / n_azimuths).reshape(h, w), 0.0, 1.0)


def illumination_geometry(dsm: SurfaceModel, sun: SunPosition, n_azimuths: int = DEFAULT_AZIMUTHS) -> IlluminationGeometry:
    normals = surface_normals(dsm)
    return IlluminationGeometry(
        v=sun_visibility(dsm, sun),
        f=sky_view_factor(dsm, n_azimuths),
        cos_theta=incident_cosine(normals, sun),
    )
