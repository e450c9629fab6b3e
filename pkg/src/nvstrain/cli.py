"""Command-line interface: simulate, fit, map, classify and pipeline.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import MapConfig, dump_json, load_config, resolve
from .errors import (ConfigError, InvalidEnsembleError, InvalidParameterError, InvalidSceneError,
                     NumericalError, StackFormatError)
from .fitting import FitConfig
from .pipeline import classify, fit, simulate, strain_maps, summarize, write_maps
from .spin_model import DEFAULT_CONSTANTS, PhysicalConstants
from .strainmap import bin_stack

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _resolved_path(out: Path) -> Path:
    return out.with_name(out.name + ".resolved.json")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    stack = simulate(cfg, args.threads)
    out = Path(args.out)
    io.write_stack(out, stack)
    _resolved_path(out).write_text(dump_json(resolve(cfg)))
    nf, ny, nx, nz = stack.dims
    print(f"wrote {out}: {nf} frequencies x {nz} slices x {ny}x{nx} pixels")
    return EXIT_OK


def _settings(config_path):
    if config_path is None:
        return FitConfig(), MapConfig(), DEFAULT_CONSTANTS
    cfg = load_config(config_path)
    return cfg.fit_config(), cfg.map, cfg.physical_constants()


def cmd_fit(args) -> int:
    fit_cfg, map_cfg, c = _settings(args.config)
    stack = io.read_stack(args.inp)
    grid, meta = fit(stack, fit_cfg, map_cfg, args.threads)
    meta["map_config"] = dataclasses.asdict(map_cfg)
    meta["constants"] = dataclasses.asdict(c)
    io.write_fit_table(args.out, grid, meta)
    s = summarize(grid)
    print(f"median ci68 = {s['median_ci68_khz']:.1f} kHz; valid fraction = {s['valid_fraction']:.4f}; "
          f"converged {s['converged']}, degenerate {s['degenerate']}, max-iter {s['max_iter']}, "
          f"rejected {s['rejected']}")
    return EXIT_OK


def cmd_map(args) -> int:
    grid, meta = io.read_fit_table(args.inp)
    map_cfg = MapConfig(**meta.get("map_config", {}))
    c = PhysicalConstants(**meta["constants"]) if "constants" in meta else DEFAULT_CONSTANTS
    maps = strain_maps(grid, meta, map_cfg, c)
    reports = write_maps(args.out, maps)
    for tag, r in reports.items():
        print(f"{tag}: median ci68 = {r['median_ci68_khz']:.1f} kHz; "
              f"precision axial {r['median_precision_axial']:.3g}, "
              f"non-axial {r['median_precision_nonaxial']:.3g}; "
              f"sensitivity axial {r['median_sensitivity_axial_per_rthz']:.3g} /sqrt(Hz)")
    return EXIT_OK


def _parse_field(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 3:
        raise ConfigError("--field", f"expected Bx,By,Bz in gauss, got {text!r}")
    return parts


def _write_classification(out: Path, om) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sidecar = {}
    for idx, grid in sorted(om.class_maps.items()):
        io.write_grid_csv(out / f"contrast_class{idx}.csv", grid)
        sidecar[f"contrast_class{idx}.pgm"] = io.write_pgm(out / f"contrast_class{idx}.pgm", grid)
    summary = {
        "n_distinct": om.n_distinct,
        "detected_groups": [g for g in om.groups if g[0] in om.detected],
        "groups": om.groups,
        "frequencies_ghz": {str(k): v for k, v in sorted(om.frequencies.items())},
        "threshold": om.threshold,
    }
    (out / "classes.json").write_text(dump_json(summary))
    (out / "scaling.json").write_text(dump_json(sidecar))


def _print_classification(om) -> None:
    print(f"{om.n_distinct} distinct classes")
    for g in om.groups:
        mark = "detected" if g[0] in om.detected else "empty"
        print(f"  classes {','.join(map(str, g))}: {om.frequencies[g[0]]:.6f} GHz ({mark})")


def cmd_classify(args) -> int:
    stack = io.read_stack(args.inp)
    om = classify(bin_stack(stack, args.bin), _parse_field(args.field), resolution=args.resolution)
    _write_classification(Path(args.out), om)
    _print_classification(om)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack = simulate(cfg, args.threads)
    io.write_stack(out / "stack.nvs", stack)
    (out / "resolved_config.json").write_text(dump_json(resolve(cfg)))
    if cfg.acquisition.mode == "high-field":
        om = classify(bin_stack(stack, cfg.map.bin_factor), cfg.acquisition.b_lab,
                      cfg.physical_constants(), cfg.acquisition.resolution)
        _write_classification(out / "classes", om)
        _print_classification(om)
        return EXIT_OK
    grid, meta = fit(stack, cfg.fit_config(), cfg.map, args.threads)
    meta["map_config"] = dataclasses.asdict(cfg.map)
    meta["constants"] = dataclasses.asdict(cfg.physical_constants())
    io.write_fit_table(out / "fits.tsv", grid, meta)
    s = summarize(grid)
    print(f"median ci68 = {s['median_ci68_khz']:.1f} kHz; valid fraction = {s['valid_fraction']:.4f}")
    write_maps(out / "maps", strain_maps(grid, meta, cfg.map, cfg.physical_constants()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvstrain", description="NV ensemble strain imaging toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render an ODMR image stack from a scenario config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit every pixel of a stack")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--config", help="scenario config supplying fit and binning settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("map", help="turn a fit table into strain maps and a sensitivity report")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("classify", help="per-class contrast maps of a high-field stack")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--field", required=True, help="Bx,By,Bz in gauss")
    p.add_argument("--resolution", type=float, default=1e-3, help="GHz")
    p.add_argument("--bin", type=int, default=1, help="spatial bin factor applied before mapping")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("pipeline", help="simulate, fit and map (or classify) in one go")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    for p in sub.choices.values():
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: NVSTRAIN_THREADS or 1)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StackFormatError, InvalidSceneError, InvalidParameterError, InvalidEnsembleError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
