"""Command-line entry point.

``demblind simulate|estimate|fit|report --config FILE [--seed N] [--out DIR]``

The config file is a flat ``key = value`` list (``#`` comments allowed).
Unknown keys are rejected. Exit codes: 0 success, 2 usage, 3 no
informative data, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ModelInestimableError, RasterError
from .likelihood import GroupEstimate
from .pipeline import PipelineConfig, run_pipeline
from .raster import PredictorVector, block_downsample, load_raster
from .regression import (LowSignificanceWarning, ModelFit, ModelType, elevation_contribution,
                         fit_all, partial_residuals, predict, reduce_at_elevation,
                         select_model)
from .simulate import EQ16, EQ17, SimulationConfig, simulate_tiles, write_simulation

logger = logging.getLogger("demblind")

EXIT_OK, EXIT_USAGE, EXIT_NO_DATA, EXIT_IO = 0, 2, 3, 4
CSV_COLUMNS = ("group_id", "param_kind", "n_patches", "nstk_mean", "z_mean", "estimate",
               "crlb_sd")
PARAM_KINDS = ("variance", "corr_width")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    out_dir: str = "out"
    seed: int = 0
    # inputs
    input_dir: str = ""
    tiles: str = ""
    raster_format: str = "ascii_grid"
    downsample: int = 1
    estimates: str = ""
    fit_dir: str = ""
    predictions: str = ""
    reduce_z: str = ""
    # pipeline
    patch_half_size: int = 5
    r_ha_threshold: float = 0.125
    group_size_cap: int = 15
    sn_ratio_ti: float = 2.0
    w_nstk: float = 1.0
    w_z: float = 0.01
    max_iterations: int = 15
    shepard_power: float = 2.0
    shape: str = "gaussian"
    max_patches_per_tile: int = 10000
    t_min: float = 10.0
    convergence_tol: float = 0.01
    m_exponent: str = "both"
    n_jobs: int = 1
    # simulation
    n_tiles: int = 3
    sites_per_side: int = 8
    site_size: int = 4
    nstk_min: int = 1
    nstk_max: int = 50
    z_min: float = 0.0
    z_max: float = 6000.0
    z_jitter: float = 10.0
    hurst_min: float = 0.4
    hurst_max: float = 0.8
    texture_ratio_min: float = 1e-3
    texture_ratio_max: float = 10.0
    variance_model: str = EQ16[0]
    variance_coeffs: str = ",".join(repr(c) for c in EQ16[1])
    corr_model: str = EQ17[0]
    corr_coeffs: str = ",".join(repr(c) for c in EQ17[1])
    cell_size: float = 90.0

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            patch_half_size=self.patch_half_size, r_ha_threshold=self.r_ha_threshold,
            group_size_cap=self.group_size_cap, sn_ratio_ti=self.sn_ratio_ti,
            predictor_weights=(self.w_nstk, self.w_z), max_iterations=self.max_iterations,
            shepard_power=self.shepard_power, shape=self.shape,
            max_patches_per_tile=self.max_patches_per_tile, t_min=self.t_min,
            convergence_tol=self.convergence_tol, m_exponent=self.m_exponent,
            n_jobs=self.n_jobs)

    def simulation(self) -> SimulationConfig:
        return SimulationConfig(
            n_tiles=self.n_tiles, sites_per_side=self.sites_per_side, site_size=self.site_size,
            half_size=self.patch_half_size, nstk_range=(self.nstk_min, self.nstk_max),
            z_range=(self.z_min, self.z_max), z_jitter=self.z_jitter,
            hurst_range=(self.hurst_min, self.hurst_max),
            texture_ratio_range=(self.texture_ratio_min, self.texture_ratio_max),
            variance_model=(ModelType(self.variance_model).value,
                            _floats(self.variance_coeffs)),
            corr_model=(ModelType(self.corr_model).value, _floats(self.corr_coeffs)),
            shape=self.shape, cell_size=self.cell_size)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def load_config(path) -> RunConfig:
    """Parse a flat ``key = value`` file into a :class:`RunConfig`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config: {exc}") from exc
    types = {f.name: f.type for f in fields(RunConfig)}
    kw = {}
    for key, raw in parser["run"].items():
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        conv = {"int": int, "float": float}.get(types[key], str)
        try:
            kw[key] = conv(raw.strip())
        except ValueError:
            raise UsageError(f"bad value for {key}: {raw!r}") from None
    return RunConfig(**kw)


# -- atomic output ------------------------------------------------------------

def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def write_estimates_csv(path, variance, corr_width):
    rows = []
    for kind, ests in (("variance", variance), ("corr_width", corr_width)):
        for e in ests:
            rows.append((len(rows), kind, e.n_patches, repr(float(e.nstk)), repr(float(e.z)),
                         repr(float(e.value)), repr(float(e.crlb_sd))))
    _write_csv(Path(path), CSV_COLUMNS, rows)


def read_estimates_csv(path) -> dict[str, list[GroupEstimate]]:
    out = {k: [] for k in PARAM_KINDS}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise UsageError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for row in reader:
            kind = row["param_kind"]
            if kind not in out:
                raise UsageError(f"{path}: unknown param_kind {kind!r}")
            out[kind].append(GroupEstimate(kind, float(row["estimate"]), float(row["crlb_sd"]),
                                           float(row["nstk_mean"]), float(row["z_mean"]),
                                           int(row["n_patches"])))
    return out


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    tiles, truth = simulate_tiles(cfg.simulation(), cfg.seed)
    paths = write_simulation(cfg.out_dir, tiles, truth, cfg.raster_format)
    logger.info("wrote %d files to %s", len(paths), cfg.out_dir)
    return EXIT_OK


def _tile_paths(cfg: RunConfig) -> list[tuple[Path, Path]]:
    pairs = []
    if cfg.tiles:
        for item in cfg.tiles.split(","):
            if not item.strip():
                continue
            parts = item.strip().split(":")
            if len(parts) != 2:
                raise UsageError(f"tiles entries must be dem:qa, got {item!r}")
            pairs.append((Path(parts[0]), Path(parts[1])))
    if cfg.input_dir:
        d = Path(cfg.input_dir)
        if not d.is_dir():
            raise OSError(f"input_dir {d} is not a directory")
        for dem in sorted(d.glob("*_dem.*")):
            if dem.suffix == ".json" or dem.name.endswith(".tmp"):
                continue
            qa = dem.with_name(dem.name.replace("_dem.", "_qa."))
            pairs.append((dem, qa))
    return pairs


def cmd_estimate(cfg: RunConfig) -> int:
    pairs = _tile_paths(cfg)
    if not pairs:
        raise UsageError("no input tiles: set input_dir or tiles")
    pcfg = cfg.pipeline()
    tiles = []
    for dem_p, qa_p in pairs:
        dem = load_raster(dem_p, cfg.raster_format)
        qa = load_raster(qa_p, cfg.raster_format)
        if cfg.downsample > 1:
            dem, qa = block_downsample(dem, cfg.downsample), block_downsample(qa, cfg.downsample)
        tiles.append((dem, qa))
    res = run_pipeline(tiles, pcfg)
    out = Path(cfg.out_dir)
    write_estimates_csv(out / "estimates.csv", res.variance, res.corr_width)
    diag = dict(res.diagnostics)
    diag["inputs"] = [[str(a), str(b)] for a, b in pairs]
    diag["accepted_groups"] = len(res.variance) + len(res.corr_width)
    _write_json(out / "diagnostics.json", diag)
    if diag["status"] != "ok":
        logger.warning("no informative data: %s", diag["status"])
        return EXIT_NO_DATA
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    src = Path(cfg.estimates) if cfg.estimates else out / "estimates.csv"
    if not src.is_file():
        raise OSError(f"estimates file not found: {src}")
    data = read_estimates_csv(src)
    candidates = cfg.pipeline().candidates
    summary, status = {}, EXIT_OK
    for kind in PARAM_KINDS:
        ests = data[kind]
        fits = fit_all(ests, candidates) if ests else {}
        for m, f in fits.items():
            rep = f.to_report() if isinstance(f, ModelFit) else {
                "param_kind": kind, "model_kind": m.value, "error": str(f)}
            rep["param_kind"] = kind
            _write_json(out / f"fit_{kind}_{m.value}.json", rep)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LowSignificanceWarning)
                best = select_model(ests, candidates, cfg.t_min, fits=fits)
        except ModelInestimableError as exc:
            rep = {"param_kind": kind, "error": f"model inestimable: {exc}",
                   "n_estimates": len(ests)}
            _write_json(out / f"selected_{kind}.json", rep)
            summary[kind] = rep
            status = EXIT_NO_DATA
            continue
        best.param_kind = kind
        rep = best.to_report()
        rep["low_significance"] = best.low_significance
        _write_json(out / f"selected_{kind}.json", rep)
        summary[kind] = rep
        pr = partial_residuals(best, ests)
        keep = ~best.outlier_mask
        used = [e for e, k in zip(ests, keep) if k]
        rows = [(i, e.nstk, e.z, t, repr(float(pr[t][i]))) for t in best.model.terms
                for i, e in enumerate(used)]
        _write_csv(out / f"partial_residuals_{kind}.csv",
                   ("row", "nstk_mean", "z_mean", "term", "partial_residual"), rows)
    _write_json(out / "fit_summary.json", summary)
    return status


def _parse_points(text: str) -> list[tuple[float, float]]:
    pts = []
    for item in text.split(";"):
        if not item.strip():
            continue
        vals = _floats(item)
        if len(vals) != 2:
            raise UsageError(f"prediction points are 'nstk,z' separated by ';', got {item!r}")
        pts.append(vals)
    return pts


def render_report(fits: dict[str, ModelFit], points, reduce_z=None) -> str:
    """Markdown summary of selected models plus predictions."""
    units = {"variance": ("sigma_e2 [m^2]", "sigma_e [m]"),
             "corr_width": ("sigma_corr2 [px^2]", "sigma_corr [px]")}
    lines = ["# DEM error model report", ""]
    for kind, fit in fits.items():
        lines += [f"## {kind}", "", f"Model `{fit.model.value}`: {fit.model.formula}", "",
                  f"R^2 = {fit.r2:.4f}, n_used = {fit.n_used}", "",
                  "| term | coefficient | SD | t-stat |", "|---|---|---|---|"]
        for t, c, s, ts in zip(fit.model.terms, fit.coeffs, fit.coeff_sds, fit.t_stats):
            lines.append(f"| {t} | {c:.6g} | {s:.4g} | {ts:.4f} |")
        lines.append("")
        if reduce_z is not None:
            a, b = reduce_at_elevation(fit, reduce_z)
            lines += [f"At Z = {reduce_z:g} m: {a:.4f} + {b:.4f} / N_stk", ""]
        if points:
            sq, sd = units[kind]
            lines += [f"| N_stk | Z [m] | {sq} | {sd} | elevation term |", "|---|---|---|---|---|"]
            for n, z in points:
                p = PredictorVector(n, z)
                v = predict(fit, p)
                lines.append(f"| {n:g} | {z:g} | {v:.4f} | {math.sqrt(v):.4f} | "
                             f"{elevation_contribution(fit, p):.4f} |")
            lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig) -> int:
    src = Path(cfg.fit_dir or cfg.out_dir)
    fits = {}
    for kind in PARAM_KINDS:
        p = src / f"selected_{kind}.json"
        if not p.is_file():
            continue
        rep = json.loads(p.read_text())
        if "error" not in rep:
            fits[kind] = ModelFit.from_report(rep)
    if not fits:
        raise OSError(f"no selected model reports in {src}")
    reduce_z = float(cfg.reduce_z) if cfg.reduce_z.strip() else None
    text = render_report(fits, _parse_points(cfg.predictions), reduce_z)
    _write_text(Path(cfg.out_dir) / "report.md", text + "\n")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "fit": cmd_fit,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="demblind",
                                 description="Blind estimation of DEM fine-scale error models.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="flat key = value config file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="override the output directory")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError) as exc:
        print(f"demblind: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RasterError) as exc:
        print(f"demblind: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
