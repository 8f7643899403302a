"""Illumination invariant spectral unmixing (IISU) with a DSM-derived geometry model."""
from importlib import metadata

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .baselines import BaselineResult, fcls_shade_unmix, fcls_unmix, nlmm_unmix, scls_unmix
from .core import (
    CalibrationSelection,
    IisuResult,
    IisuSettings,
    estimate_illumination,
    shadow_compensated_reflectance,
    unmix_image,
    unmix_pixel,
)
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
)
from .geometry import illumination_geometry
from .metrics import compare_methods, evaluate, nre, rmse_a, rmse_r
from .simulate import make_sim1
