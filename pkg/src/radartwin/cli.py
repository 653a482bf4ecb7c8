"""Operator command line.

Exit codes: 0 success (and gate pass), 1 gate fail, 2 usage/configuration
error, 3 runtime error.  All runs are captured by a single JSON config
plus flat ``--set key=value`` overrides; the resolved config is recorded
inside every report directory.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import io as rtio
from .errors import (
    CompatibilityError,
    ConfigurationError,
    PhaseOrderError,
    RadarTwinError,
    UnsatisfiableDiversityError,
)
from .metrics import MetricReport, compute_report
from .pipeline import (
    GateConfig,
    ExcursionSpec,
    Phase3Config,
    PipelineConfig,
    RedesignSpec,
    ScenarioSpace,
    build_dataset,
    load_dataset,
    run_phase1,
    run_phase2,
    run_phase3,
)
from .rfsim import RadarConfig
from .scene import PlatformState, TerrainSpec, generate_terrain

EXIT_OK = 0
EXIT_GATE_FAIL = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

OUTPUT_ROOT_ENV = "RADARTWIN_OUTPUT_ROOT"


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

_SECTION_TYPES = {
    "scene": TerrainSpec,
    "platform": PlatformState,
    "radar": RadarConfig,
    "gates": GateConfig,
    "excursion": ExcursionSpec,
    "redesign": RedesignSpec,
    "phase3": Phase3Config,
}
_SCALAR_KEYS = {"master_seed", "workers", "output_root", "scene_seed",
                "n_samples", "folds", "localizer"}


def _build_section(cls, data: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(
            f"unknown keys in '{section}': {sorted(unknown)}"
        )
    coerced = dict(data)
    for f in fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


def parse_pipeline_config(raw: dict) -> PipelineConfig:
    """Strict construction: unknown keys anywhere are rejected."""
    known = _SCALAR_KEYS | set(_SECTION_TYPES) | {"scenario"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key in _SCALAR_KEYS:
        if key in raw:
            kwargs[key] = raw[key]
    for key, cls in _SECTION_TYPES.items():
        if key in raw:
            kwargs[key] = _build_section(cls, raw[key], key)
    if "scenario" in raw:
        kwargs["scenario"] = ScenarioSpace.from_dict(raw["scenario"])
    cfg = PipelineConfig(**kwargs)
    if os.environ.get(OUTPUT_ROOT_ENV):
        cfg.output_root = os.environ[OUTPUT_ROOT_ENV]
    cfg.scenario.validate()
    cfg.radar.validate()
    cfg.platform.validate()
    cfg.scene.validate()
    return cfg


def _apply_overrides(raw: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"--set path {key!r} crosses a scalar")
        node[parts[-1]] = parsed
    return raw


def load_config(path, overrides=None) -> PipelineConfig:
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}")
    return parse_pipeline_config(_apply_overrides(raw, overrides))


def _record_config(cfg: PipelineConfig):
    root = Path(cfg.output_root)
    root.mkdir(parents=True, exist_ok=True)
    rtio.write_json(root / "run_config.json", _config_dict(cfg))


def _config_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = asdict(value) if is_dataclass(value) else value
    out["scenario"] = cfg.scenario.to_dict()
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set)
    scene = generate_terrain(cfg.scene_seed, cfg.scene)
    radar = cfg.resolved_radar(scene)
    n = args.count if args.count is not None else cfg.n_samples
    seed = args.seed if args.seed is not None else cfg.master_seed
    out = Path(args.out) if args.out else Path(cfg.output_root) / "datasets" / "baseline"
    manifest = build_dataset(
        out, scene, radar, cfg.platform, cfg.scenario, n, seed,
        name=args.name, workers=args.workers or cfg.workers,
    )
    print(f"wrote {manifest.n} maps to {out} "
          f"(diversity {manifest.diversity:.4f}, hash {manifest.content_hash()[:12]})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .localize import cross_validate

    maps, truths, manifest = load_dataset(args.dataset)
    results, fold_hash = cross_validate(
        maps, truths, folds=args.folds, seed=args.seed,
        localizer_params=json.loads(args.localizer_params)
        if args.localizer_params else None,
    )
    out = Path(args.out)
    for fr in results:
        fr.model.save(out / f"fold_{fr.fold}",
                      extra={"fold": fr.fold, "dataset": manifest.content_hash()})
    rtio.write_json(out / "training.json", {
        "dataset": manifest.content_hash(),
        "folds": args.folds,
        "assignment_hash": fold_hash,
        "fold_reports": [fr.report.to_dict() for fr in results],
    })
    for fr in results:
        print(f"fold {fr.fold}: mae_range {fr.report.mae_range:.3f} "
              f"mae_doppler {fr.report.mae_doppler:.3f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .localize import ArgMaxLocalizer, CfarDetector, CnnLocalizer

    maps, truths, manifest = load_dataset(args.dataset)
    algorithms = args.algorithms.split(",")
    reports = {}
    for name in algorithms:
        if name == "argmax":
            est = ArgMaxLocalizer().predict(maps)
            reports[name] = compute_report("argmax", est, truths)
        elif name == "cfar":
            cfar = CfarDetector()
            est = np.array([cfar.point_estimate(m).as_array() for m in maps])
            dets = [np.array([d.as_array() for d in dd]).reshape(-1, 2)
                    for dd in cfar.predict(maps)]
            reports[name] = compute_report("cfar", est, truths,
                                           detections_per_map=dets)
        elif name == "cnn":
            if not args.model:
                raise ConfigurationError("--model is required for the cnn algorithm")
            model = CnnLocalizer.load(args.model)
            reports[name] = compute_report("cnn", model.predict(maps), truths)
        else:
            raise ConfigurationError(f"unknown algorithm {name!r}")
    payload = {"dataset": manifest.content_hash(),
               "algorithms": {k: v.to_dict() for k, v in reports.items()}}
    if args.out:
        rtio.write_json(args.out, payload)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_phase(args, runner, phase_name) -> int:
    cfg = load_config(args.config, args.set)
    _record_config(cfg)
    report = runner(cfg)
    passed = getattr(report, "passed", True)
    print(f"{phase_name}: {'PASS' if passed else 'FAIL' if hasattr(report, 'passed') else 'DONE'}"
          f" -> {Path(cfg.output_root) / 'reports' / (phase_name + '.json')}")
    if hasattr(report, "n_flagged"):
        print(f"flagged {report.n_flagged} of {report.n_streamed} "
              f"(rejected {report.n_rejected})")
    return EXIT_OK if passed else EXIT_GATE_FAIL


def _cmd_gan_train(args) -> int:
    from .blackswan import build_pairs, train_cgan, validation_l1, discriminator_accuracy

    cfg = load_config(args.config, args.set)
    radar = cfg.radar
    pairs = build_pairs(radar, n=args.pairs, seed=args.seed, grid=(64, 64))
    bundle = train_cgan(pairs, epochs=args.epochs, seed=args.seed,
                        lambda_l1=args.lambda_l1)
    out = Path(args.out) if args.out else Path(cfg.output_root) / "models" / "gan"
    bundle.save(out)
    l1 = validation_l1(bundle, pairs)
    acc = discriminator_accuracy(bundle, pairs)
    rtio.write_json(out / "metrics.json", {
        "validation_l1": l1, "discriminator_accuracy": acc,
        "n_pairs": args.pairs, "epochs": args.epochs, "seed": args.seed,
    })
    print(f"gan: val L1 {l1:.4f}, discriminator accuracy {acc:.3f} -> {out}")
    return EXIT_OK


def _cmd_gan_generate(args) -> int:
    from .blackswan import GeneratorBundle, generate_clutter
    from .pipeline import _phase3_conditioning

    bundle = GeneratorBundle.load(args.bundle)
    cfg = load_config(args.config, args.set) if args.config else PipelineConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        scene_seed = rtio.derive_seed(args.seed, "gen-scene", i)
        tspec = TerrainSpec(nx=96, ny=96, cell_size=70.0)
        scene = generate_terrain(scene_seed, tspec)
        conditioning = _phase3_conditioning(bundle, scene, cfg.radar)
        gen_map, latency = generate_clutter(
            bundle, conditioning, rtio.derive_seed(args.seed, "gen", i)
        )
        digest = rtio.write_raw_array(out / f"clutter_{i:04d}.f32", gen_map,
                                      np.float32)
        entries.append({"file": f"clutter_{i:04d}.f32", "sha256": digest,
                        "scene_seed": scene_seed, "latency_s": latency})
    rtio.write_json(out / "generated.json", {
        "count": args.count, "seed": args.seed,
        "grid": bundle.normalization["grid"], "maps": entries,
    })
    print(f"generated {args.count} clutter maps -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    data = rtio.read_json(args.report)
    algorithms = data.get("algorithms", {})
    if args.format == "json":
        text = json.dumps(data, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n")
        else:
            print(text)
        return EXIT_OK
    # CSV: one row per algorithm, full float precision for exact round-trips
    rows = [list(MetricReport.CSV_COLUMNS)]
    for name in sorted(algorithms):
        rows.append(MetricReport.from_dict(algorithms[name]).csv_row())
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(target)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    finally:
        if args.out:
            target.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radartwin",
        description="GMTI range-Doppler digital twin and three-phase "
                    "test-and-evaluation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="pipeline JSON config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path, JSON value)")

    p = sub.add_parser("simulate", help="build a range-Doppler map dataset")
    add_config(p)
    p.add_argument("--count", type=int, help="number of maps")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--name", default="dataset")
    p.add_argument("--workers", type=int, help="parallel sample builders")

    p = sub.add_parser("train", help="k-fold train the localizer on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--localizer-params", help="JSON dict of CnnLocalizer params")

    p = sub.add_parser("eval", help="evaluate algorithms on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="localizer model directory (for cnn)")
    p.add_argument("--algorithms", default="argmax,cfar")
    p.add_argument("--out", help="write the report JSON here")

    for phase in ("phase1", "phase2", "phase3"):
        p = sub.add_parser(phase, help=f"run {phase}")
        add_config(p)

    gan = sub.add_parser("gan", help="conditional clutter generator")
    gan_sub = gan.add_subparsers(dest="gan_command", required=True)
    p = gan_sub.add_parser("train", help="build pairs and train the generator")
    add_config(p)
    p.add_argument("--pairs", type=int, default=300)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-l1", type=float, default=100.0)
    p.add_argument("--out", help="bundle output directory")
    p = gan_sub.add_parser("generate", help="generate clutter maps")
    add_config(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="re-emit a report as CSV or JSON")
    p.add_argument("report")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors
        return int(exc.code or 0)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "phase1":
            return _cmd_phase(args, run_phase1, "phase1")
        if args.command == "phase2":
            return _cmd_phase(args, run_phase2, "phase2")
        if args.command == "phase3":
            return _cmd_phase(args, lambda cfg: run_phase3(cfg), "phase3")
        if args.command == "gan":
            if args.gan_command == "train":
                return _cmd_gan_train(args)
            return _cmd_gan_generate(args)
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (ConfigurationError, CompatibilityError, PhaseOrderError,
            UnsatisfiableDiversityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RadarTwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
