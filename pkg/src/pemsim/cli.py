"""Command-line front door.

Exit codes: 0 ok, 1 runtime or invariant failure, 2 config error. Every
nonzero exit prints one JSON diagnostic record on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import ConfigValidationError, ScenarioConfig, bundled_names, load_config
from .core import ConfigError, PemError
from .engine import compute_kpis, replay_check, run
from .export import EXTENSIONS, Format, kpi_json, kpis_from_dir, render, slice_rows, write_artifacts
from .oracle import generate_suite, load_suite, run_suite

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

OUT_ENV = "PEMSIM_OUT"
DEFAULT_OUT = "pemsim-out"


class CliFailure(Exception):
    def __init__(self, code: int, kind: str, message: str, **detail: Any) -> None:
        super().__init__(message)
        self.code = code
        self.record = {"status": "error", "exit_code": code, "kind": kind, "message": message, **detail}


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _config(args: argparse.Namespace) -> ScenarioConfig:
    if not args.config:
        raise CliFailure(EXIT_CONFIG, "config", f"{args.command} needs --config")
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed)


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _emit({"status": "ok", "scenario": cfg.name, "horizon_slots": cfg.horizon_slots, "seed": cfg.seed})
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = run(cfg)
    paths = write_artifacts(result, _out_dir(args), Format(args.format))
    _emit({"status": "ok", "scenario": cfg.name, "artifacts": {k: str(p) for k, p in paths.items()}})
    return EXIT_OK


def cmd_kpi(args: argparse.Namespace) -> int:
    if args.config:
        kpis = compute_kpis(run(_config(args)))
    else:
        out = _out_dir(args)
        if not (out / "meta.json").exists():
            raise CliFailure(EXIT_CONFIG, "config", f"no run artifacts in {out}; pass --config or --out")
        kpis = kpis_from_dir(out)
    if args.format == Format.JSON_LINES.value:
        sys.stdout.write(json.dumps(kpis.to_dict(), sort_keys=True) + "\n")
    elif args.format == Format.CSV.value:
        sys.stdout.write(render([_flat(kpis.to_dict())], Format.CSV))
    else:
        sys.stdout.write(kpi_json(kpis))
    return EXIT_OK


def _flat(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        elif isinstance(v, list):
            out[prefix + k] = ";".join(map(str, v))
        else:
            out[prefix + k] = v
    return out


def cmd_oracle_check(args: argparse.Namespace) -> int:
    if args.generate:
        suite = generate_suite(args.generate, args.seed if args.seed is not None else 20240605)
    else:
        suite = load_suite(args.suite)
    report = run_suite(suite)
    _emit(report.to_dict())
    if not report.ok:
        raise CliFailure(EXIT_RUNTIME, "oracle", "admission disagrees with the exhaustive oracle", report=report.to_dict())
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    cfg = _config(args)
    rep = replay_check(run(cfg), cfg)
    if not rep:
        raise CliFailure(EXIT_RUNTIME, "replay", rep.detail, artifact=rep.artifact, slot=rep.slot)
    _emit({"status": "ok", "scenario": cfg.name, "identical": True})
    return EXIT_OK


def cmd_export_slices(args: argparse.Namespace) -> int:
    cfg = _config(args)
    fmt = Format(args.format)
    text = render(slice_rows(run(cfg)), fmt)
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"slices.{EXTENSIONS[fmt]}"
        path.write_text(text)
        _emit({"status": "ok", "slices": str(path)})
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "kpi": cmd_kpi,
    "oracle-check": cmd_oracle_check,
    "replay": cmd_replay,
    "export-slices": cmd_export_slices,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pemsim", description="Packetized energy management simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"scenario file or bundled name ({', '.join(bundled_names())})")
    common.add_argument("--out", help=f"output directory (env {OUT_ENV}, default {DEFAULT_OUT})")
    common.add_argument("--seed", type=_u64, help="override the scenario seed")
    common.add_argument("--format", choices=[f.value for f in Format], default=Format.CSV.value)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a scenario file")
    sub.add_parser("run", parents=[common], help="run a scenario and write artifacts")
    sub.add_parser("kpi", parents=[common], help="print KPIs of a scenario or of a previous run's artifacts")
    oc = sub.add_parser("oracle-check", parents=[common], help="compare admission with exhaustive enumeration")
    oc.add_argument("--suite", help="instance file (default: bundled 50-instance suite)")
    oc.add_argument("--generate", type=int, metavar="N", help="check N generated instances instead")
    sub.add_parser("replay", parents=[common], help="run twice and compare artifacts byte for byte")
    sub.add_parser("export-slices", parents=[common], help="write the per-class slice table")
    return p


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return EXIT_OK
        _fail(CliFailure(EXIT_CONFIG, "usage", "invalid command line"))
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except CliFailure as e:
        _fail(e)
        return e.code
    except ConfigValidationError as e:
        _fail(CliFailure(EXIT_CONFIG, "config", str(e), diagnostics=e.diagnostics))
        return EXIT_CONFIG
    except ConfigError as e:
        _fail(CliFailure(EXIT_CONFIG, "config", str(e)))
        return EXIT_CONFIG
    except PemError as e:
        _fail(CliFailure(EXIT_RUNTIME, type(e).__name__, str(e)))
        return EXIT_RUNTIME
    except OSError as e:
        _fail(CliFailure(EXIT_RUNTIME, "io", str(e)))
        return EXIT_RUNTIME


def _fail(e: CliFailure) -> None:
    sys.stderr.write(json.dumps(e.record, sort_keys=True, default=str) + "\n")


if __name__ == "__main__":
    sys.exit(main())
