"""Command line runner: ``run``, ``sweep``, ``presets`` and ``validate``.

Run directories look like::

    OUT/config.json
    OUT/summary.csv
    OUT/seed-<s>/metrics.jsonl
    OUT/seed-<s>/manifest.json
    OUT/seed-<s>/checkpoint.bin

Sweeps nest one such directory per value under ``OUT/<param>-<value>/`` and add
``OUT/sweep.csv``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .config import PRESETS, ExperimentConfig, get_preset, parse_config, validate
from .errors import ConfigError, FedPGPError, InvalidParameterError
from .evaluation import AGGREGATE
from .federation import run_experiment

log = logging.getLogger("fedpgp")

OUT_ROOT_ENV = "FEDPGP_OUT_ROOT"
METRICS = ("acc_local", "acc_base", "acc_novel", "acc_target", "hm", "l_ce", "l_con")
SWEEPABLE = ("mu", "b", "shots")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise InvalidParameterError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, workers: int = 1) -> dict:
    """Run one seed into ``out``; returns the manifest that was written."""
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    t0 = time.perf_counter()
    error = None
    final: dict = {}
    with metrics_path.open("w", encoding="utf-8") as fh:
        def emit(records):
            for r in records:
                fh.write(r.to_json() + "\n")
            fh.flush()

        try:
            result = run_experiment(cfg, seed=seed, workers=workers, on_records=emit)
        except (FedPGPError, ArithmeticError, ValueError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            result = None
    if result is not None:
        meta = {"seed": seed, "round": cfg.T, "strategy": cfg.strategy}
        checkpoint.save(out / "checkpoint.bin", checkpoint.collect_arrays(result.p_G, result.adapters), meta)
        agg = [r for r in result.history if r.client == AGGREGATE]
        if agg:
            final = {k: v for k, v in agg[-1].to_dict().items() if k in METRICS}
    outputs = sorted(p for p in out.iterdir() if p.name != "manifest.json")
    hashes = {p.name: sha256_file(p) for p in outputs}
    combined = hashlib.sha256("".join(f"{n}:{h}\n" for n, h in hashes.items()).encode()).hexdigest()
    manifest = {
        "config": cfg.to_dict(),
        "seed": seed,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "outputs": hashes,
        "content_hash": combined,
        "partial": error is not None,
        "error": error,
        "final": final,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def summarize(manifests: Sequence[dict]) -> list[dict]:
    """mean/std (population) of each final aggregate metric across seeds."""
    rows = []
    for m in METRICS:
        vals = [man["final"][m] for man in manifests if m in man.get("final", {})]
        if vals:
            rows.append({"metric": m, "mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)})
    return rows


def _write_csv(path: Path, rows: list[dict], fieldnames: Sequence[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def run(cfg: ExperimentConfig, out: Path, *, workers: int = 1, force: bool = False) -> tuple[int, list[dict]]:
    _ensure_empty(out, force)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    manifests = [run_seed(cfg, s, out / f"seed-{s}", workers) for s in cfg.seeds]
    _write_csv(out / "summary.csv", summarize(manifests), ("metric", "mean", "std", "n"))
    failed = [m["seed"] for m in manifests if m["partial"]]
    for s in failed:
        log.error("seed %s failed", s)
    return (EXIT_FAILED if failed else EXIT_OK), manifests


def sweep(cfg: ExperimentConfig, parameter: str, values: Sequence, out: Path, *, workers: int = 1,
          force: bool = False) -> tuple[int, list[dict]]:
    """One full run per value with shared seeds; writes ``sweep.csv`` and returns its rows."""
    if parameter not in SWEEPABLE:
        raise InvalidParameterError(f"cannot sweep {parameter!r}; choose from {SWEEPABLE}")
    if not values:
        raise InvalidParameterError("sweep needs at least one value")
    cfgs = [validate(replace(cfg, **{parameter: _cast(parameter, v)})) for v in values]
    _ensure_empty(out, force)
    rows, status = [], EXIT_OK
    for v, c in zip(values, cfgs):
        code, manifests = run(c, out / f"{parameter}-{v}", workers=workers, force=force)
        status = max(status, code)
        for man in manifests:
            rows.append({"param": parameter, "value": v, "seed": man["seed"], **man["final"]})
        for kind in ("mean", "std"):
            agg = {"param": parameter, "value": v, "seed": kind}
            for stat in summarize(manifests):
                agg[stat["metric"]] = stat[kind]
            rows.append(agg)
    present = [m for m in METRICS if any(m in r for r in rows)]
    _write_csv(out / "sweep.csv", rows, ("param", "value", "seed", *present))
    return status, rows


def _cast(parameter: str, value):
    if parameter == "mu":
        return float(value)
    f = float(value)
    if not f.is_integer():
        raise ConfigError(parameter, f"must be an integer, got {value!r}")
    return int(f)


def parse_seed_list(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or ``"0-2"`` (inclusive ranges may be mixed with commas)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part[0] + part[1:].split("-", 1)[0], part[1:].split("-", 1)[1]
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError("seeds", f"bad seed list {text!r}") from None
    return tuple(seeds)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat object of config keys)")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--seed", help="seed list, e.g. 0,1,2 or 0-4")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    runner = argparse.ArgumentParser(add_help=False, parents=[common])
    runner.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<name>)")
    runner.add_argument("--force", action="store_true", help="allow writing into a nonempty directory")
    runner.add_argument("--workers", type=int, default=1, help="threads for client training")

    parser = argparse.ArgumentParser(prog="fedpgp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[runner], help="train and evaluate for each seed")
    sp = sub.add_parser("sweep", parents=[runner], help="repeat a run over values of one parameter")
    sp.add_argument("--param", required=True, choices=SWEEPABLE)
    sp.add_argument("--values", required=True, help="comma separated values")
    sub.add_parser("presets", help="list the preset experiments")
    sub.add_parser("validate", parents=[common], help="check a config and print it resolved")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    cfg = parse_config(args.config, preset=args.preset, overrides=overrides)
    if args.seed:
        cfg = validate(replace(cfg, seeds=parse_seed_list(args.seed)))
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / (args.preset or cfg.strategy)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "presets":
        for name in sorted(PRESETS):
            print(f"{name}: {json.dumps(PRESETS[name], sort_keys=True)}")
        return EXIT_OK
    try:
        cfg = resolve_config(args)
        if args.verb == "validate":
            print(cfg.to_json())
            return EXIT_OK
        if args.workers < 1:
            raise InvalidParameterError("--workers must be >= 1")
        out = _out_dir(args, cfg)
        if args.verb == "run":
            status, _ = run(cfg, out, workers=args.workers, force=args.force)
        else:
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            status, _ = sweep(cfg, args.param, values, out, workers=args.workers, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
