"""Command-line front end: simulate, geometry, unmix, evaluate, render.

Every command reads an optional JSON config (``--config``); relative paths
inside it are resolved against the config file's directory. Exit codes:
0 success, 1 usage or config error, 2 data/validation error, 3 solver
non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BASELINES
from .core import (
    BcdDivergenceError,
    CalibrationSelection,
    IisuSettings,
    estimate_illumination,
    shadow_compensated_reflectance,
    unmix_image,
)
from .datamodel import (
    AbundanceMap,
    CubeKind,
    DataError,
    IlluminationGeometry,
    SpectralCube,
    SunPosition,
    load_cube,
    load_endmembers,
    load_spectra,
    load_surface,
    save_cube,
    save_spectra,
)
from .geometry import DEFAULT_AZIMUTHS, illumination_geometry
from .metrics import compare_methods, evaluate, nre
from .simulate import SIM1_WAVELENGTHS, make_sim1, measured_snr_db, write_scene
from .solvers import AdmmSettings, NnlsConvergenceError

METHODS = ("iisu", "fcls", "fcls-s", "scls", "nlmm")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(Exception):
    """Bad command line or config file contents."""


class SolverFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


class Config:
    """JSON config plus the directory its relative paths are resolved against."""

    def __init__(self, data: dict, base: Path, raw: bytes = b"{}"):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        self.data = data
        self.base = base
        self.digest = hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path) -> "Config":
        if path is None:
            return cls({}, Path.cwd())
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls(data, path.resolve().parent, raw)

    def get(self, key, default=None):
        return self.data.get(key, default)

    def number(self, key, default):
        val = self.data.get(key, default)
        if val == "inf":
            return math.inf
        try:
            return float(val)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} must be a number, got {val!r}") from None

    def path(self, key, required=True) -> Path | None:
        val = self.data.get(key)
        if val is None:
            if required:
                raise ConfigError(f"config key {key!r} is required")
            return None
        p = Path(val)
        p = p if p.is_absolute() else self.base / p
        if not (p.exists() or p.with_suffix(".json").exists()):
            raise ConfigError(f"{key}: {p} does not exist")
        return p

    def sun(self) -> SunPosition:
        try:
            return SunPosition(self.number("zenith", 40.0), self.number("azimuth", 190.0))
        except DataError as exc:
            raise ConfigError(str(exc)) from exc


def _manifest(out: Path, name: str, args, cfg: Config, extra=None):
    doc = {
        "command": args.command,
        "config_sha256": cfg.digest,
        "seed": args.seed,
        "version": __version__,
    }
    doc.update(extra or {})
    (out / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _output_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- simulate


def cmd_simulate(args, cfg: Config) -> int:
    out = _output_dir(args)
    sun = cfg.sun()
    wl = cfg.get("wavelengths")
    if wl is None:
        wavelengths = SIM1_WAVELENGTHS
    elif isinstance(wl, dict):
        wavelengths = np.linspace(float(wl["start"]), float(wl["stop"]), int(wl["bands"]))
    else:
        wavelengths = np.asarray(wl, dtype=np.float64)
    spectra_path = cfg.path("spectra", required=False)
    spectra = load_spectra(spectra_path) if spectra_path else None
    snr = cfg.number("snr_db", 50.0)
    if math.isnan(snr) or snr == -math.inf:
        raise ConfigError("snr_db must be finite or 'inf'")
    scene = make_sim1(
        snr_db=snr,
        e=cfg.number("e", 0.01),
        seed=args.seed,
        zenith=sun.zenith,
        azimuth=sun.azimuth,
        wavelengths=wavelengths,
        n_azimuths=int(cfg.number("n_azimuths", DEFAULT_AZIMUTHS)),
        spectra=spectra,
    )
    write_scene(scene.spec, out)
    save_cube(scene.radiance, out / "radiance")
    save_cube(scene.reflectance, out / "reflectance")
    save_cube(scene.truth_reflectance, out / "truth_reflectance")
    save_cube(scene.geometry.to_cube(), out / "geometry")
    save_spectra(scene.spectra, out / "spectra.csv", scene.spec.endmembers.wavelengths)
    h, w = scene.geometry.shape
    rows, cols = np.unravel_index(scene.calibration_pixels, (h, w))
    calibration = {"class": scene.calibration_class,
                   "pixels": [[int(r), int(c)] for r, c in zip(rows, cols)]}
    (out / "calibration.json").write_text(json.dumps(calibration, indent=1) + "\n")
    unmix_cfg = {
        "radiance": "radiance.json",
        "reflectance": "reflectance.json",
        "geometry": "geometry.json",
        "endmembers": "endmembers.csv",
        "calibration": "calibration.json",
        "truth_abundances": "truth_abundance.json",
        "truth_reflectance": "truth_reflectance.json",
        "results": ".",
    }
    (out / "unmix.json").write_text(json.dumps(unmix_cfg, indent=2) + "\n")
    _manifest(out, "manifest.json", args, cfg, {
        "snr_db": "inf" if snr == math.inf else snr,
        "measured_snr_db": _snr(scene),
        "shadow_fraction": float(np.mean(scene.geometry.v == 0)),
    })
    print(f"scene written to {out}")
    return EXIT_OK


def _snr(scene):
    val = measured_snr_db(scene.radiance_clean, scene.radiance)
    return val if math.isfinite(val) else "inf"


# ---------------------------------------------------------------- geometry


def cmd_geometry(args, cfg: Config) -> int:
    out = _output_dir(args)
    dsm = load_surface(cfg.path("dsm"))
    sun = cfg.sun()
    n_az = int(cfg.number("n_azimuths", DEFAULT_AZIMUTHS))
    if n_az < 8:
        raise ConfigError("n_azimuths must be at least 8")
    geom = illumination_geometry(dsm, sun, n_az)
    path = save_cube(geom.to_cube(), out / "geometry")
    _manifest(out, "geometry_manifest.json", args, cfg, {"zenith": sun.zenith, "azimuth": sun.azimuth})
    print(f"geometry written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- unmix


def _selected(args) -> list[str]:
    return list(METHODS) if args.method == "all" else [args.method]


def _admm_settings(cfg: Config) -> AdmmSettings:
    raw = cfg.get("admm", {})
    if not isinstance(raw, dict):
        raise ConfigError("admm must be an object")
    try:
        return AdmmSettings(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"admm settings: {exc}") from exc


def _read_calibration(cfg: Config, geom: IlluminationGeometry):
    path = cfg.get("calibration")
    if path is None:
        raise ConfigError("iisu needs a calibration selection (config key 'calibration')")
    path = cfg.path("calibration")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"calibration file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "class" not in doc or not doc.get("pixels"):
        raise DataError(f"calibration file {path} needs a class name and a non-empty pixel list")
    px = np.asarray(doc["pixels"], dtype=np.int64)
    if px.ndim != 2 or px.shape[1] != 2:
        raise DataError("calibration pixels must be [row, col] pairs")
    h, w = geom.shape
    if np.any(px < 0) or np.any(px[:, 0] >= h) or np.any(px[:, 1] >= w):
        raise DataError("calibration pixel outside the image")
    return str(doc["class"]), px


def _save_method(out: Path, method: str, abundances: AbundanceMap, reflectance: SpectralCube,
                 reconstruction: SpectralCube, report: dict, args, cfg: Config):
    save_cube(abundances.to_cube(), out / f"{method}_abundance")
    save_cube(reflectance, out / f"{method}_reflectance")
    save_cube(reconstruction, out / f"{method}_reconstruction")
    (out / f"{method}_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _manifest(out, f"{method}_manifest.json", args, cfg, {"method": method})


def _run_iisu(args, cfg: Config, lib, out: Path):
    cube = load_cube(cfg.path("radiance"))
    if cube.kind != CubeKind.RADIANCE:
        raise DataError(f"iisu needs a radiance cube, got {cube.kind.value}")
    geom = IlluminationGeometry.from_cube(load_cube(cfg.path("geometry")))
    settings = IisuSettings(
        bcd_tol=cfg.number("bcd_tol", 1e-4),
        bcd_max_iter=int(cfg.number("bcd_max_iter", 200)),
        admm=_admm_settings(cfg),
    )
    report = {}
    spectra_path = cfg.path("spectra", required=False)
    if spectra_path is not None:
        spectra = load_spectra(spectra_path)
        report["spectra"] = "given"
    else:
        cls, px = _read_calibration(cfg, geom)
        reference = lib.matrix[:, lib.index(cls)]
        sel = CalibrationSelection.from_image(cube, geom, px, reference)
        est = estimate_illumination(sel, lib, settings)
        if not est.converged:
            raise SolverFailure(f"illumination estimate did not converge in {settings.bcd_max_iter} iterations")
        spectra = est.spectra
        save_spectra(spectra, out / "iisu_spectra.csv", lib.wavelengths)
        report.update(spectra="estimated", bcd_iterations=est.iterations, bcd_objective=est.objectives[-1])
    res = unmix_image(cube, lib, spectra, geom, settings, workers=args.threads)
    refl = shadow_compensated_reflectance(lib, res.abundances)
    report.update(
        method="iisu",
        nre=nre(cube, res.reconstruction),
        admm_unconverged=int(np.sum(~res.converged)),
        degenerate_pixels=int(np.sum(res.degenerate)),
    )
    _save_method(out, "iisu", res.abundances, refl, res.reconstruction, report, args, cfg)


def _run_baseline(args, cfg: Config, lib, out: Path, method: str):
    cube = load_cube(cfg.path("reflectance"))
    if cube.kind != CubeKind.APPARENT_REFLECTANCE:
        raise DataError(f"{method} needs an apparent reflectance cube, got {cube.kind.value}")
    fn = BASELINES[method]
    kwargs = {"workers": args.threads}
    if method == "nlmm":
        kwargs["settings"] = _admm_settings(cfg)
    res = fn(cube, lib, **kwargs)
    refl = shadow_compensated_reflectance(lib, res.abundances)
    report = {"method": method, "nre": nre(cube, res.reconstruction),
              "degenerate_pixels": int(np.sum(res.degenerate))}
    _save_method(out, method, res.abundances, refl, res.reconstruction, report, args, cfg)


def cmd_unmix(args, cfg: Config) -> int:
    out = _output_dir(args)
    lib = load_endmembers(cfg.path("endmembers"))
    for method in _selected(args):
        if method == "iisu":
            _run_iisu(args, cfg, lib, out)
        else:
            _run_baseline(args, cfg, lib, out, method)
        print(f"{method}: results written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args, cfg: Config) -> int:
    out = _output_dir(args)
    results = cfg.path("results", required=False) or Path(args.output_dir)
    truth = AbundanceMap.from_cube(load_cube(cfg.path("truth_abundances")))
    lib = load_endmembers(cfg.path("endmembers"))
    if tuple(truth.class_names) != tuple(lib.class_names):
        raise DataError("ground-truth classes do not match the endmember library")
    truth_r_path = cfg.path("truth_reflectance", required=False)
    truth_r = load_cube(truth_r_path) if truth_r_path else shadow_compensated_reflectance(lib, truth)
    geom_path = cfg.path("geometry", required=False)
    shaded = None
    if geom_path is not None:
        shaded = IlluminationGeometry.from_cube(load_cube(geom_path)).v.ravel() == 0
    observed = {}
    reports = []
    for method in _selected(args):
        if not (results / f"{method}_abundance.json").exists():
            if args.method == "all":
                continue
            raise DataError(f"no {method} results in {results}")
        key = "radiance" if method == "iisu" else "reflectance"
        if key not in observed:
            observed[key] = load_cube(cfg.path(key))
        est = AbundanceMap.from_cube(load_cube(results / f"{method}_abundance"))
        if est.fractions.shape != truth.fractions.shape:
            raise DataError(f"{method}: estimate is {est.fractions.shape}, truth is {truth.fractions.shape}")
        reports.append(evaluate(
            method, truth, est, truth_r,
            load_cube(results / f"{method}_reflectance"),
            observed[key], load_cube(results / f"{method}_reconstruction"), shaded,
        ))
    if not reports:
        raise DataError(f"no method results found in {results}")
    table = compare_methods(reports)
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.txt").write_text(table.to_text())
    (out / "comparison.json").write_text(table.to_json() + "\n")
    _manifest(out, "evaluate_manifest.json", args, cfg, {"methods": table.methods})
    print(table.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- render


def stretch(band: np.ndarray, low: float = 2.0, high: float = 98.0) -> np.ndarray:
    """Linear percentile stretch to 0..255; a band with no spread maps to 128."""
    lo, hi = np.percentile(band, [low, high])
    if not hi > lo:
        return np.full(band.shape, 128, dtype=np.uint8)
    scaled = (band - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> Path:
    path = Path(path)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    return path


def rgb_bands(cube: SpectralCube, bands=None, wavelengths=(640.0, 550.0, 460.0)) -> list[int]:
    if bands is None:
        return [int(np.argmin(np.abs(cube.wavelengths - w))) for w in wavelengths]
    bands = [int(b) for b in bands]
    if len(bands) != 3:
        raise DataError("render needs exactly three band indices")
    for b in bands:
        if not 0 <= b < cube.bands:
            raise DataError(f"band index {b} out of range for a {cube.bands}-band cube")
    return bands


def cmd_render(args, cfg: Config) -> int:
    out = _output_dir(args)
    cube = load_cube(cfg.path("cube"))
    bands = rgb_bands(cube, cfg.get("bands"), tuple(cfg.get("rgb_wavelengths", (640.0, 550.0, 460.0))))
    rgb = np.stack([stretch(cube.values[b]) for b in bands], axis=-1)
    name = cfg.get("output", "render.ppm")
    path = write_ppm(out / name, rgb)
    print(f"image written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- main


COMMANDS = {
    "simulate": cmd_simulate,
    "geometry": cmd_geometry,
    "unmix": cmd_unmix,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iisu", description="Illumination invariant spectral unmixing")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--method", default="all", choices=[*METHODS, "all"])
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-pixel work")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--output-dir", default=".")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = Config.load(args.config)
        if args.command != "simulate" and args.config is None:
            raise ConfigError(f"{args.command} needs --config")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"iisu: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NnlsConvergenceError, BcdDivergenceError, SolverFailure) as exc:
        print(f"iisu: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"iisu: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
