"""Illumination invariant unmixing of radiance data.

Step 1 (:func:`estimate_illumination`) recovers the direct-sun and
diffuse-sky spectra from pixels of one known material seen both in sun and
in shadow, alternating between the spectra and the per-pixel indirect
coefficients. Step 2 (:func:`unmix_image`) fits every pixel with its own
illumination-adjusted endmembers plus bilinear terms for indirect
sunlight, then normalizes the material abundances to sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._blocks import DEFAULT_CHUNK, map_blocks
from .datamodel import (
    AbundanceMap,
    BilinearCoefficients,
    CubeKind,
    DataError,
    EndmemberLibrary,
    IlluminationGeometry,
    IlluminationSpectra,
    SpectralCube,
)
from .solvers import AdmmSettings, nnls_active_set, nnls_admm_batch

__all__ = [
    "IisuSettings",
    "CalibrationSelection",
    "IlluminationEstimate",
    "BcdDivergenceError",
    "IisuResult",
    "bilinear_pairs",
    "build_bilinear_dictionary",
    "pixel_design",
    "estimate_illumination",
    "unmix_pixel",
    "unmix_image",
    "shadow_compensated_reflectance",
]


@dataclass(frozen=True)
class IisuSettings:
    # stop Step 1 when the objective moves by less than this fraction
    bcd_tol: float = 1e-4
    bcd_max_iter: int = 200
    admm: AdmmSettings = field(default_factory=AdmmSettings)
    degenerate_tol: float = 1e-12
    # fixed block size keeps results identical for any worker count
    chunk_size: int = DEFAULT_CHUNK


class BcdDivergenceError(RuntimeError):
    """Step 1 objective increased or became non-finite; ``iterates`` holds the history."""

    def __init__(self, message, iterates):
        super().__init__(message)
        self.iterates = iterates


def _matrix(M) -> np.ndarray:
    return M.matrix if isinstance(M, EndmemberLibrary) else np.asarray(M, dtype=np.float64)


def bilinear_pairs(K: int) -> list[tuple[int, int]]:
    """Class index pairs ``(k, j)`` with ``j >= k`` in dictionary column order."""
    return [(k, j) for k in range(K) for j in range(k, K)]


def build_bilinear_dictionary(M) -> np.ndarray:
    """``B x K(K+1)/2`` matrix of elementwise endmember products ``m_k * m_j``, ``j >= k``."""
    m = _matrix(M)
    pairs = bilinear_pairs(m.shape[1])
    return np.column_stack([m[:, k] * m[:, j] for k, j in pairs])


def pixel_design(M, spectra: IlluminationSpectra, v, f, cos_theta) -> np.ndarray:
    """Stacked per-pixel designs ``[diag(s1 v cos + s2 f) M | diag(s1) Xi]``.

    ``v``, ``f`` and ``cos_theta`` are scalars or length-P arrays; the result
    is ``(P, B, K + R)``.
    """
    m = _matrix(M)
    v, f, c = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (v, f, cos_theta))
    scale = spectra.s1[None, :] * (v * c)[:, None] + spectra.s2[None, :] * f[:, None]
    linear = scale[:, :, None] * m[None, :, :]
    bilinear = spectra.s1[:, None] * build_bilinear_dictionary(m)
    bilinear = np.broadcast_to(bilinear, (scale.shape[0],) + bilinear.shape)
    return np.concatenate([linear, bilinear], axis=2)


@dataclass(frozen=True, eq=False)
class CalibrationSelection:
    """Radiance of N pixels of one reference material, in sun and in shadow.

    ``radiance`` is ``B x N``; ``v``, ``f``, ``cos_theta`` are length N.
    """

    radiance: np.ndarray
    reference: np.ndarray
    v: np.ndarray
    f: np.ndarray
    cos_theta: np.ndarray
    pixel_indices: np.ndarray | None = None

    def __post_init__(self):
        L = np.asarray(self.radiance, dtype=np.float64)
        m = np.asarray(self.reference, dtype=np.float64).reshape(-1)
        v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        f = np.asarray(self.f, dtype=np.float64).reshape(-1)
        c = np.asarray(self.cos_theta, dtype=np.float64).reshape(-1)
        if L.ndim != 2 or L.shape[0] != m.size:
            raise DataError("radiance must be bands x pixels matching the reference spectrum")
        n = L.shape[1]
        if n < 2:
            raise DataError("calibration needs at least two pixels")
        if not (v.size == f.size == c.size == n):
            raise DataError("v, f and cos_theta must have one entry per selected pixel")
        if np.any(m < 0):
            raise DataError("reference spectrum must be nonnegative")
        if not np.any(v == 1) or not np.any(v == 0):
            raise DataError(
                "calibration selection needs both sunlit (v=1) and shaded (v=0) pixels; "
                "skylight is not identifiable otherwise"
            )
        for name, val in (("radiance", L), ("reference", m), ("v", v), ("f", f), ("cos_theta", c)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_image(cls, cube: SpectralCube, geom: IlluminationGeometry, pixels, reference) -> "CalibrationSelection":
        """Gather the selection from flat pixel indices or ``(row, col)`` pairs."""
        idx = np.asarray(pixels)
        if idx.ndim == 2:
            idx = np.ravel_multi_index((idx[:, 0], idx[:, 1]), (cube.height, cube.width))
        idx = idx.astype(np.int64).reshape(-1)
        return cls(
            cube.pixels()[:, idx],
            reference,
            geom.v.ravel()[idx],
            geom.f.ravel()[idx],
            geom.cos_theta.ravel()[idx],
            idx,
        )

    @property
    def n_pixels(self) -> int:
        return self.radiance.shape[1]


@dataclass(frozen=True, eq=False)
class IlluminationEstimate:
    spectra: IlluminationSpectra
    coefficients: np.ndarray
    objectives: list[float]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.objectives)


def _step1_model(sel: CalibrationSelection, bil: np.ndarray, s1, s2, E) -> np.ndarray:
    m = sel.reference[:, None]
    direct = s1[:, None] * (m * (sel.v * sel.cos_theta)[None, :] + bil @ E)
    return direct + s2[:, None] * m * sel.f[None, :]


def estimate_illumination(sel: CalibrationSelection, M, settings: IisuSettings | None = None) -> IlluminationEstimate:
    """Block coordinate descent for ``s1``, ``s2`` and the indirect coefficients E.

    Starts from ``E = 0``. The spectra sub-problem separates by band into
    N x 2 NNLS problems; the E sub-problem separates by pixel into B x K
    NNLS problems with design ``diag(s1) (M * m)``. Iteration stops once the
    objective changes by less than ``settings.bcd_tol`` times the
    first iteration's objective.
    """
    settings = settings or IisuSettings()
    lib = _matrix(M)
    L = sel.radiance
    m = sel.reference
    B, N = L.shape
    K = lib.shape[1]
    if lib.shape[0] != B:
        raise DataError("endmember and radiance band counts differ")
    bil = lib * m[:, None]
    vc = sel.v * sel.cos_theta
    E = np.zeros((K, N))
    s1 = np.zeros(B)
    s2 = np.zeros(B)
    prev = 0.5 * float(np.sum(L * L))
    objectives: list[float] = []
    converged = False

    for _ in range(settings.bcd_max_iter):
        coef1 = m[:, None] * vc[None, :] + bil @ E
        coef2 = m[:, None] * sel.f[None, :]
        for b in range(B):
            s1[b], s2[b] = nnls_active_set(np.column_stack([coef1[b], coef2[b]]), L[b])

        G = L - m[:, None] * (s1[:, None] * vc[None, :] + s2[:, None] * sel.f[None, :])
        design = s1[:, None] * bil
        for n in range(N):
            E[:, n] = nnls_active_set(design, G[:, n])

        resid = L - _step1_model(sel, bil, s1, s2, E)
        obj = 0.5 * float(np.sum(resid * resid))
        objectives.append(obj)
        if not np.isfinite(obj) or obj > prev * (1 + 1e-8) + 1e-300:
            raise BcdDivergenceError(
                f"illumination estimate diverged at iteration {len(objectives)}: {prev:.6g} -> {obj:.6g}",
                {"objectives": list(objectives), "s1": s1.copy(), "s2": s2.copy(), "E": E.copy()},
            )
        if len(objectives) > 1 and abs(prev - obj) <= settings.bcd_tol * objectives[0]:
            converged = True
            break
        prev = obj

    return IlluminationEstimate(IlluminationSpectra(s1.copy(), s2.copy()), E.copy(), objectives, converged)


@dataclass(frozen=True, eq=False)
class IisuResult:
    abundances: AbundanceMap
    bilinear: BilinearCoefficients
    degenerate: np.ndarray
    reconstruction: SpectralCube
    converged: np.ndarray


def _solve_block(M, spectra, v, f, c, L, settings: IisuSettings):
    K = M.shape[1]
    designs = pixel_design(M, spectra, v, f, c)
    sol = nnls_admm_batch(designs, L, settings.admm)
    a_raw = sol.x[:, :K]
    total = a_raw.sum(axis=1)
    degenerate = total < settings.degenerate_tol
    a = np.empty_like(a_raw)
    ok = ~degenerate
    a[ok] = a_raw[ok] / total[ok, None]
    a[degenerate] = 1.0 / K
    recon = (designs @ sol.x[:, :, None])[:, :, 0]
    return a, sol.x[:, K:], degenerate, recon, sol.converged


def unmix_pixel(l_p, M, spectra: IlluminationSpectra, v_p, f_p, cos_theta_p,
                settings: IisuSettings | None = None):
    """Unmix one radiance spectrum; returns ``(a_p, x_p, degenerate)``."""
    settings = settings or IisuSettings()
    m = _matrix(M)
    l_p = np.asarray(l_p, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(l_p)):
        raise DataError("radiance must be finite")
    a, x, deg, _, _ = _solve_block(m, spectra, [v_p], [f_p], [cos_theta_p], l_p, settings)
    return a[0], x[0], bool(deg[0])


def unmix_image(cube: SpectralCube, M, spectra: IlluminationSpectra, geom: IlluminationGeometry,
                settings: IisuSettings | None = None, workers: int = 1) -> IisuResult:
    """Unmix every pixel of a radiance cube independently.

    Pixels are processed in fixed-size blocks; ``workers`` only controls how
    many blocks run at once, so the output is identical for any worker count.
    """
    settings = settings or IisuSettings()
    if cube.kind != CubeKind.RADIANCE:
        raise DataError(f"IISU unmixes radiance, got a {cube.kind.value} cube")
    if geom.shape != (cube.height, cube.width):
        raise DataError(f"geometry is {geom.shape}, cube is {(cube.height, cube.width)}")
    m = _matrix(M)
    if m.shape[0] != cube.bands or spectra.bands != cube.bands:
        raise DataError("cube, endmember and spectra band counts differ")
    names = M.class_names if isinstance(M, EndmemberLibrary) else tuple(f"class{k}" for k in range(m.shape[1]))

    L = cube.pixels().T
    v, f, c = geom.v.ravel(), geom.f.ravel(), geom.cos_theta.ravel()

    def run(sl):
        return _solve_block(m, spectra, v[sl], f[sl], c[sl], L[sl], settings)

    a, x, deg, recon, conv = map_blocks(run, L.shape[0], settings.chunk_size, workers)
    abundances = AbundanceMap(a.T, names, cube.height, cube.width, deg)
    reconstruction = SpectralCube.from_pixels(recon.T, cube.height, cube.width, cube.wavelengths, CubeKind.RADIANCE)
    return IisuResult(abundances, BilinearCoefficients(x.T, m.shape[1]), deg, reconstruction, conv)


def shadow_compensated_reflectance(M, A: AbundanceMap, wavelengths=None) -> SpectralCube:
    """Reflectance ``M a_p`` for every pixel."""
    m = _matrix(M)
    if m.shape[1] != A.n_classes:
        raise DataError("endmember and abundance class counts differ")
    if wavelengths is None:
        wavelengths = M.wavelengths if isinstance(M, EndmemberLibrary) else np.arange(1.0, m.shape[0] + 1)
    return SpectralCube.from_pixels(m @ A.fractions, A.height, A.width, wavelengths, CubeKind.REFLECTANCE)
