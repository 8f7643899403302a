"""Reference unmixing models that work on apparent reflectance.

* FCLS: nonnegative, sum-to-one abundances.
* FCLS with a shade endmember: a constant dark spectrum soaks up shadow
  darkening; material abundances are renormalized without it.
* SCLS: nonnegative abundances with a free per-pixel scale ``tau``.
* NLMM: nonnegative linear + bilinear regression with the shade column.

FCLS-s and NLMM report the material abundances renormalized over the
material classes only, so every method is scored on the same K classes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._blocks import DEFAULT_CHUNK, map_blocks
from .core import build_bilinear_dictionary
from .datamodel import AbundanceMap, CubeKind, DataError, EndmemberLibrary, SpectralCube
from .solvers import AdmmSettings, fcls_solve, nnls_active_set, nnls_admm_batch

__all__ = [
    "BaselineResult",
    "SHADE_REFLECTANCE",
    "BASELINES",
    "fcls_unmix",
    "fcls_shade_unmix",
    "scls_unmix",
    "nlmm_unmix",
]

SHADE_REFLECTANCE = 0.001
DEGENERATE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class BaselineResult:
    """Abundances plus the method's extra per-pixel quantity.

    ``auxiliary`` is ``tau`` (SCLS, length P), the shade fraction (FCLS-s,
    length P), the bilinear coefficients (NLMM, ``R x P``) or None (FCLS).
    """

    method: str
    abundances: AbundanceMap
    auxiliary: np.ndarray | None
    reconstruction: SpectralCube
    degenerate: np.ndarray


def _prepare(cube: SpectralCube, M):
    if cube.kind != CubeKind.APPARENT_REFLECTANCE:
        raise DataError(f"baselines unmix apparent reflectance, got a {cube.kind.value} cube")
    if isinstance(M, EndmemberLibrary):
        m, names = M.matrix, M.class_names
    else:
        m = np.asarray(M, dtype=np.float64)
        names = tuple(f"class{k}" for k in range(m.shape[1]))
    if m.ndim != 2 or m.shape[0] != cube.bands:
        raise DataError(f"endmember matrix has {m.shape[0]} bands, cube has {cube.bands}")
    return m, names, cube.pixels().T


def _normalize(raw: np.ndarray):
    total = raw.sum(axis=1)
    degenerate = total < DEGENERATE_TOL
    a = np.full_like(raw, 1.0 / raw.shape[1])
    a[~degenerate] = raw[~degenerate] / total[~degenerate, None]
    return a, degenerate


def _result(method, cube, names, a, degenerate, recon, aux) -> BaselineResult:
    abundances = AbundanceMap(a.T, names, cube.height, cube.width, degenerate)
    reconstruction = SpectralCube.from_pixels(recon.T, cube.height, cube.width, cube.wavelengths,
                                              CubeKind.APPARENT_REFLECTANCE)
    return BaselineResult(method, abundances, aux, reconstruction, degenerate)


def fcls_unmix(cube: SpectralCube, M, *, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> BaselineResult:
    m, names, Y = _prepare(cube, M)

    def run(sl):
        a = np.array([fcls_solve(m, y) for y in Y[sl]])
        return a, a @ m.T

    a, recon = map_blocks(run, Y.shape[0], chunk_size, workers)
    return _result("fcls", cube, names, a, np.zeros(len(a), dtype=bool), recon, None)


def fcls_shade_unmix(cube: SpectralCube, M, *, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> BaselineResult:
    m, names, Y = _prepare(cube, M)
    K = m.shape[1]
    ms = np.column_stack([m, np.full(m.shape[0], SHADE_REFLECTANCE)])

    def run(sl):
        raw = np.array([fcls_solve(ms, y) for y in Y[sl]])
        return raw, raw @ ms.T

    raw, recon = map_blocks(run, Y.shape[0], chunk_size, workers)
    a, degenerate = _normalize(raw[:, :K])
    return _result("fcls-s", cube, names, a, degenerate, recon, raw[:, K].copy())


def scls_unmix(cube: SpectralCube, M, *, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> BaselineResult:
    m, names, Y = _prepare(cube, M)

    def run(sl):
        raw = np.array([nnls_active_set(m, y) for y in Y[sl]])
        return raw, raw @ m.T

    raw, recon = map_blocks(run, Y.shape[0], chunk_size, workers)
    a, degenerate = _normalize(raw)
    tau = raw.sum(axis=1)
    return _result("scls", cube, names, a, degenerate, recon, tau)


def nlmm_unmix(cube: SpectralCube, M, *, settings: AdmmSettings | None = None,
               workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> BaselineResult:
    m, names, Y = _prepare(cube, M)
    K = m.shape[1]
    design = np.column_stack([m, np.full(m.shape[0], SHADE_REFLECTANCE), build_bilinear_dictionary(m)])

    def run(sl):
        x = nnls_admm_batch(design, Y[sl], settings).x
        return x, x @ design.T

    x, recon = map_blocks(run, Y.shape[0], chunk_size, workers)
    a, degenerate = _normalize(x[:, :K])
    return _result("nlmm", cube, names, a, degenerate, recon, x[:, K + 1:].T.copy())


BASELINES = {
    "fcls": fcls_unmix,
    "fcls-s": fcls_shade_unmix,
    "scls": scls_unmix,
    "nlmm": nlmm_unmix,
}
