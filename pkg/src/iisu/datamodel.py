"""Domain types and file I/O for cubes, surface models and spectral libraries.

Cubes are stored as a JSON header plus a raw band-sequential payload of
little-endian float32 values. Surface models use the ESRI ASCII grid
layout and endmember libraries a plain CSV table. All solver math runs in
float64; the float32 conversion only happens when a cube is written.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "DataError",
    "CubeKind",
    "SpectralCube",
    "SurfaceModel",
    "SunPosition",
    "IlluminationGeometry",
    "EndmemberLibrary",
    "IlluminationSpectra",
    "AbundanceMap",
    "BilinearCoefficients",
    "load_cube",
    "save_cube",
    "load_surface",
    "save_surface",
    "load_endmembers",
    "save_endmembers",
    "load_spectra",
    "save_spectra",
]

FILE_DTYPE = np.dtype("<f4")


class DataError(ValueError):
    """Raised when a product violates its invariants or a file is malformed."""


class CubeKind(str, enum.Enum):
    RADIANCE = "radiance"
    APPARENT_REFLECTANCE = "apparent_reflectance"
    REFLECTANCE = "reflectance"
    ABUNDANCE = "abundance"
    GEOMETRY = "geometry"


_NONNEGATIVE_KINDS = {CubeKind.APPARENT_REFLECTANCE, CubeKind.REFLECTANCE, CubeKind.ABUNDANCE}


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """A ``bands x height x width`` raster held in band-sequential order.

    ``values[b, row, col]``; row 0 is the northern edge of the scene.
    ``band_names`` is optional and used for abundance and geometry rasters,
    whose "wavelengths" are plain band indices.
    """

    values: np.ndarray
    wavelengths: np.ndarray
    kind: CubeKind = CubeKind.RADIANCE
    band_names: tuple[str, ...] | None = None

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3:
            raise DataError(f"cube values must be 3-D (bands, height, width), got shape {values.shape}")
        wavelengths = _frozen(self.wavelengths).reshape(-1)
        if wavelengths.size != values.shape[0]:
            raise DataError(f"{wavelengths.size} wavelengths for {values.shape[0]} bands")
        if wavelengths.size > 1 and not np.all(np.diff(wavelengths) > 0):
            raise DataError("wavelengths must be strictly increasing")
        if self.band_names is not None and len(self.band_names) != values.shape[0]:
            raise DataError("band_names length does not match band count")
        kind = CubeKind(self.kind)
        if not np.all(np.isfinite(values)):
            raise DataError("cube contains non-finite values")
        if not np.all(np.isfinite(wavelengths)):
            raise DataError("wavelengths must be finite")
        if kind in _NONNEGATIVE_KINDS and np.any(values < 0):
            raise DataError(f"{kind.value} cube contains negative values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "wavelengths", wavelengths)
        object.__setattr__(self, "kind", kind)
        if self.band_names is not None:
            object.__setattr__(self, "band_names", tuple(str(n) for n in self.band_names))

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """Return a ``(bands, P)`` view with pixels in row-major order."""
        return self.values.reshape(self.bands, -1)

    @classmethod
    def from_pixels(cls, pixels, height, width, wavelengths, kind, band_names=None) -> "SpectralCube":
        pixels = np.asarray(pixels, dtype=np.float64)
        return cls(pixels.reshape(pixels.shape[0], height, width), wavelengths, kind, band_names)

    def validate(self) -> "SpectralCube":
        """Reject empty cubes, which can be built but not written or unmixed."""
        if self.n_pixels == 0 or self.bands == 0:
            raise DataError("cube has no pixels")
        return self


def _header_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_cube(cube: SpectralCube, path) -> Path:
    """Write ``cube`` as ``<path>.json`` + ``<path>.bin``; returns the header path."""
    cube.validate()
    header_path, data_path = _header_paths(path)
    header = {
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "wavelengths": [float(w) for w in cube.wavelengths],
        "kind": cube.kind.value,
        "dtype": "f32",
        "interleave": "bsq",
        "byte_order": "little",
        "data_file": data_path.name,
    }
    if cube.band_names is not None:
        header["band_names"] = list(cube.band_names)
    payload = np.ascontiguousarray(cube.values, dtype=FILE_DTYPE)
    data_path.write_bytes(payload.tobytes(order="C"))
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def load_cube(path) -> SpectralCube:
    header_path, data_path = _header_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"cube header not found: {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed cube header {header_path}: {exc}") from exc
    data_path = header_path.with_name(header.get("data_file", data_path.name))
    if not data_path.exists():
        raise FileNotFoundError(f"cube payload not found: {data_path}")
    for key in ("width", "height", "bands", "wavelengths", "kind"):
        if key not in header:
            raise DataError(f"cube header missing '{key}'")
    if header.get("dtype", "f32") != "f32" or header.get("interleave", "bsq") != "bsq":
        raise DataError("only little-endian f32 band-sequential payloads are supported")
    if header.get("byte_order", "little") != "little":
        raise DataError("only little-endian payloads are supported")

    bands, height, width = int(header["bands"]), int(header["height"]), int(header["width"])
    raw = data_path.read_bytes()
    expected = bands * height * width
    if len(raw) != expected * FILE_DTYPE.itemsize:
        raise DataError(
            f"payload size mismatch: {len(raw) / FILE_DTYPE.itemsize:g} values on disk, header declares {expected}"
        )
    values = np.frombuffer(raw, dtype=FILE_DTYPE).astype(np.float64).reshape(bands, height, width)
    cube = SpectralCube(values, header["wavelengths"], CubeKind(header["kind"]), header.get("band_names"))
    return cube.validate()


@dataclass(frozen=True, eq=False)
class SurfaceModel:
    """Elevation grid (metres). ``elevations[row, col]`` with row 0 at the north edge."""

    elevations: np.ndarray
    cell_size: float
    nodata: float | None = None

    def __post_init__(self):
        elev = _frozen(self.elevations)
        if elev.ndim != 2:
            raise DataError("elevations must be a 2-D grid")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        object.__setattr__(self, "elevations", elev)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        if not np.all(np.isfinite(elev[self.valid_mask])):
            raise DataError("non-nodata elevations must be finite")

    @property
    def height(self) -> int:
        return self.elevations.shape[0]

    @property
    def width(self) -> int:
        return self.elevations.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        if self.nodata is None:
            return np.ones(self.elevations.shape, dtype=bool)
        return self.elevations != self.nodata

    def filled(self) -> np.ndarray:
        """Elevations with nodata cells replaced by their nearest valid neighbour."""
        valid = self.valid_mask
        if valid.all():
            return np.array(self.elevations)
        if not valid.any():
            raise DataError("surface model has no valid cells")
        _, (rows, cols) = ndimage.distance_transform_edt(~valid, return_indices=True)
        return self.elevations[rows, cols]


_REQUIRED_GRID_KEYS = ("ncols", "nrows", "cellsize")
_OPTIONAL_GRID_KEYS = ("xllcorner", "yllcorner", "xllcenter", "yllcenter", "nodata_value")


def load_surface(path) -> SurfaceModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"surface model not found: {path}")
    header: dict[str, float] = {}
    tokens: list[str] = []
    with path.open() as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if not tokens and key in _REQUIRED_GRID_KEYS + _OPTIONAL_GRID_KEYS:
                if len(parts) != 2:
                    raise DataError(f"malformed header line: {line.strip()!r}")
                try:
                    header[key] = float(parts[1])
                except ValueError as exc:
                    raise DataError(f"malformed header line: {line.strip()!r}") from exc
            else:
                tokens.extend(parts)
    missing = [k for k in _REQUIRED_GRID_KEYS if k not in header]
    if missing:
        raise DataError(f"grid header missing {', '.join(missing)}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"non-numeric grid value: {exc}") from exc
    if values.size != ncols * nrows:
        raise DataError(f"grid holds {values.size} values, header declares {ncols * nrows}")
    return SurfaceModel(values.reshape(nrows, ncols), header["cellsize"], header.get("nodata_value"))


def save_surface(dsm: SurfaceModel, path) -> Path:
    path = Path(path)
    lines = [
        f"ncols {dsm.width}",
        f"nrows {dsm.height}",
        "xllcorner 0.0",
        "yllcorner 0.0",
        f"cellsize {dsm.cell_size!r}",
    ]
    if dsm.nodata is not None:
        lines.append(f"NODATA_value {float(dsm.nodata)!r}")
    for row in dsm.elevations:
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass(frozen=True)
class SunPosition:
    """Solar zenith and azimuth in degrees; azimuth runs clockwise from north."""

    zenith: float
    azimuth: float

    def __post_init__(self):
        if not (0.0 <= self.zenith < 90.0):
            raise DataError(f"zenith must lie in [0, 90), got {self.zenith}")
        if not (0.0 <= self.azimuth < 360.0):
            raise DataError(f"azimuth must lie in [0, 360), got {self.azimuth}")

    @property
    def direction(self) -> np.ndarray:
        """Unit vector toward the sun in (east, north, up) components."""
        z, a = math.radians(self.zenith), math.radians(self.azimuth)
        return np.array([math.sin(z) * math.sin(a), math.sin(z) * math.cos(a), math.cos(z)])


GEOMETRY_BANDS = ("v", "f", "cos_theta")


@dataclass(frozen=True, eq=False)
class IlluminationGeometry:
    """Per-pixel sun visibility, sky-view factor and incidence cosine (all ``height x width``)."""

    v: np.ndarray
    f: np.ndarray
    cos_theta: np.ndarray

    def __post_init__(self):
        v = _frozen(self.v, np.uint8)
        f = _frozen(self.f)
        c = _frozen(self.cos_theta)
        if not (v.shape == f.shape == c.shape) or v.ndim != 2:
            raise DataError("v, f and cos_theta must be 2-D grids of equal shape")
        if not np.all((v == 0) | (v == 1)):
            raise DataError("v must be binary")
        if not (np.all(np.isfinite(f)) and np.all((f >= 0) & (f <= 1))):
            raise DataError("f must lie in [0, 1]")
        if not (np.all(np.isfinite(c)) and np.all((c >= 0) & (c <= 1))):
            raise DataError("cos_theta must lie in [0, 1]")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "cos_theta", c)

    @property
    def shape(self) -> tuple[int, int]:
        return self.v.shape

    def to_cube(self) -> SpectralCube:
        values = np.stack([self.v.astype(np.float64), self.f, self.cos_theta])
        return SpectralCube(values, [1.0, 2.0, 3.0], CubeKind.GEOMETRY, GEOMETRY_BANDS)

    @classmethod
    def from_cube(cls, cube: SpectralCube) -> "IlluminationGeometry":
        if cube.bands != 3:
            raise DataError(f"geometry raster needs 3 bands (v, f, cos_theta), got {cube.bands}")
        v = cube.values[0]
        if not np.all((v == 0) | (v == 1)):
            raise DataError("band 0 of a geometry raster must be binary")
        return cls(v.astype(np.uint8), cube.values[1], cube.values[2])


@dataclass(frozen=True, eq=False)
class EndmemberLibrary:
    """``matrix`` is ``bands x classes``; column k is the reflectance of ``class_names[k]``."""

    matrix: np.ndarray
    class_names: tuple[str, ...]
    wavelengths: np.ndarray

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.ndim != 2 or m.shape[1] < 1:
            raise DataError("endmember matrix must be bands x classes with at least one class")
        names = tuple(str(n) for n in self.class_names)
        if len(names) != m.shape[1]:
            raise DataError(f"{len(names)} class names for {m.shape[1]} columns")
        if len(set(names)) != len(names):
            raise DataError("duplicate class names")
        wl = _frozen(self.wavelengths).reshape(-1)
        if wl.size != m.shape[0]:
            raise DataError(f"{wl.size} wavelengths for {m.shape[0]} bands")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise DataError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(m)) or np.any(m < 0) or np.any(m > 1):
            raise DataError("endmember reflectance must lie in [0, 1]")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "wavelengths", wl)

    @property
    def bands(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DataError(f"unknown class {name!r}; library has {list(self.class_names)}") from None

    def reorder(self, order: Sequence[int]) -> "EndmemberLibrary":
        order = list(order)
        return EndmemberLibrary(self.matrix[:, order], [self.class_names[i] for i in order], self.wavelengths)


def _read_csv_table(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"table not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [c.strip() for c in rows[0]]
    body = rows[1:]
    try:
        table = np.array([[float(c) for c in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"non-numeric value in {path}: {exc}") from exc
    if table.size and table.shape[1] != len(header):
        raise DataError(f"ragged table in {path}")
    return header, table.reshape(len(body), len(header))


def load_endmembers(path) -> EndmemberLibrary:
    """Read a CSV whose first column is ``wavelength_nm`` and whose other columns are classes."""
    header, table = _read_csv_table(path)
    if len(header) < 2:
        raise DataError("endmember CSV needs a wavelength column and at least one class column")
    if table.shape[0] < 2:
        raise DataError("endmember CSV needs at least two bands")
    return EndmemberLibrary(table[:, 1:], header[1:], table[:, 0])


def save_endmembers(lib: EndmemberLibrary, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavelength_nm", *lib.class_names])
        for wl, row in zip(lib.wavelengths, lib.matrix):
            writer.writerow([repr(float(wl)), *(repr(float(v)) for v in row)])
    return path


@dataclass(frozen=True, eq=False)
class IlluminationSpectra:
    """Direct sunlight ``s1`` and diffuse skylight ``s2`` per band."""

    s1: np.ndarray
    s2: np.ndarray
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        s1 = _frozen(self.s1).reshape(-1)
        s2 = _frozen(self.s2).reshape(-1)
        if s1.shape != s2.shape:
            raise DataError("s1 and s2 must have the same length")
        if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
            raise DataError("illumination spectra must be finite")
        if np.any(s1 < 0) or np.any(s2 < 0):
            raise DataError("illumination spectra must be nonnegative")
        object.__setattr__(self, "s1", s1)
        object.__setattr__(self, "s2", s2)
        if self.wavelengths is not None:
            object.__setattr__(self, "wavelengths", _frozen(self.wavelengths).reshape(-1))

    @property
    def bands(self) -> int:
        return self.s1.size


def load_spectra(path) -> IlluminationSpectra:
    """Read an override CSV with columns ``wavelength_nm, s1, s2``."""
    header, table = _read_csv_table(path)
    if [h.lower() for h in header[1:]] != ["s1", "s2"] or len(header) != 3:
        raise DataError("spectra CSV must have columns wavelength_nm, s1, s2")
    return IlluminationSpectra(table[:, 1], table[:, 2], table[:, 0])


def save_spectra(spectra: IlluminationSpectra, path, wavelengths=None) -> Path:
    path = Path(path)
    wl = spectra.wavelengths if wavelengths is None else np.asarray(wavelengths, dtype=float)
    if wl is None:
        raise DataError("wavelengths are required to write spectra")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavelength_nm", "s1", "s2"])
        for w, a, b in zip(wl, spectra.s1, spectra.s2):
            writer.writerow([repr(float(w)), repr(float(a)), repr(float(b))])
    return path


@dataclass(frozen=True, eq=False)
class AbundanceMap:
    """Per-pixel class fractions, ``fractions[k, p]`` with pixels in row-major order.

    ``degenerate`` flags pixels whose raw abundances summed to ~0 and were
    replaced by the uniform vector.
    """

    fractions: np.ndarray
    class_names: tuple[str, ...]
    height: int
    width: int
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        a = _frozen(self.fractions)
        if a.ndim != 2:
            raise DataError("fractions must be classes x pixels")
        if a.shape[1] != self.height * self.width:
            raise DataError(f"{a.shape[1]} pixels for a {self.height}x{self.width} map")
        if len(self.class_names) != a.shape[0]:
            raise DataError("class_names length does not match class count")
        if np.any(a < 0):
            raise DataError("abundances must be nonnegative")
        object.__setattr__(self, "fractions", a)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        deg = np.zeros(a.shape[1], dtype=bool) if self.degenerate is None else self.degenerate
        object.__setattr__(self, "degenerate", _frozen(deg, bool).reshape(-1))

    @property
    def n_classes(self) -> int:
        return self.fractions.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.fractions.shape[1]

    def to_cube(self) -> SpectralCube:
        return SpectralCube.from_pixels(
            self.fractions, self.height, self.width,
            np.arange(1, self.n_classes + 1, dtype=float), CubeKind.ABUNDANCE, self.class_names,
        )

    @classmethod
    def from_cube(cls, cube: SpectralCube) -> "AbundanceMap":
        names = cube.band_names or tuple(f"class{i}" for i in range(cube.bands))
        return cls(cube.pixels(), names, cube.height, cube.width)


@dataclass(frozen=True, eq=False)
class BilinearCoefficients:
    """Per-pixel nonnegative coefficients of the ``K(K+1)/2`` bilinear endmembers."""

    coefficients: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = _frozen(self.coefficients)
        r = self.n_classes * (self.n_classes + 1) // 2
        if x.ndim != 2 or x.shape[0] != r:
            raise DataError(f"expected {r} bilinear rows for K={self.n_classes}, got shape {x.shape}")
        if np.any(x < 0):
            raise DataError("bilinear coefficients must be nonnegative")
        object.__setattr__(self, "coefficients", x)
