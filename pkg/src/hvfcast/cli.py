"""Command-line pipeline with deterministic, file-based handoffs.

Subcommands: simulate -> pairs -> split -> train (arch | features |
intervals) -> evaluate / predict / report.  Every command writes a run
manifest (`run_manifest.json` or `<output>.run_manifest.json`) beside its
outputs; manifests carry timestamps, everything else is byte-reproducible
for a fixed seed.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 training
divergence.  `HVFCAST_SEED` provides a global fallback seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .domain import (
    DomainError,
    EYE_FROM_WIRE,
    EYE_TO_WIRE,
    load_dataset,
    mask_cells,
    parse_record,
    save_dataset,
)
from .evaluation import (
    EvaluationError,
    ensemble_predict,
    evaluate_testset,
    report_csv_rows,
)
from .models import (
    ModelError,
    canonical_specs,
    count_parameters_spec,
    load_weights,
    published_comparison,
    spec_from_name,
)
from .pipeline import (
    BIN_CENTERS,
    FeatureCombo,
    PipelineError,
    SplitPlan,
    bin_pairs,
    assign_bin,
    encode_input,
    make_pairs,
    pairs_for_patients,
    read_pairs,
    split_patients,
    write_pairs,
)
from .synthsim import DEFAULT_MIX, CohortConfig, SimError, generate_cohort
from .trainer import (
    DESK_EPOCHS,
    DESK_WIDTHS,
    PAPER_EPOCHS,
    PAPER_WIDTHS,
    PHASE_ARCH,
    PHASE_FEATURES,
    PHASE_INTERVALS,
    TrainConfig,
    TrainerError,
    TrainingDiverged,
    load_interval_models,
    select_architecture,
    select_features,
    train_interval_chain,
    write_phase_result,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

_DATA_ERRORS = (
    DomainError,
    PipelineError,
    SimError,
    EvaluationError,
    ModelError,
    TrainerError,
    OSError,
    json.JSONDecodeError,
)


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("HVFCAST_SEED")
    return int(env) if env else 0


def _write_run_manifest(target, command: str, config: dict, inputs, outputs, started: str) -> None:
    """`run_manifest.json` inside a directory target, else `<file>.run_manifest.json`."""
    target = Path(target)
    path = target / "run_manifest.json" if target.is_dir() else target.with_name(target.name + ".run_manifest.json")
    manifest = {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _utc_now(),
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _parse_widths(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise argparse.ArgumentTypeError(f"widths must be three integers, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _parse_mix(entries: list[str] | None) -> dict:
    if not entries:
        return dict(DEFAULT_MIX)
    mix = {}
    for entry in entries:
        name, _, weight = entry.partition("=")
        if not weight:
            raise argparse.ArgumentTypeError(f"expected NAME=WEIGHT, got {entry!r}")
        mix[name] = float(weight)
    return mix


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_simulate(args) -> int:
    started = _utc_now()
    seed = _resolve_seed(args.seed)
    cfg = CohortConfig(
        patients=args.patients,
        tests_per_eye=(args.tests_min, args.tests_max),
        followup_years=(args.span_min, args.span_max),
        archetype_mix=_parse_mix(args.archetype),
        rate_range=(args.rate_min, args.rate_max),
        noise=args.noise,
        seed=seed,
    )
    fields, meta = generate_cohort(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(fields, out)
    meta_path = out.parent / "cohort_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    _write_run_manifest(out, "simulate", cfg.to_json_dict(), [], [out, meta_path], started)
    print(f"wrote {len(fields)} fields for {cfg.patients} patients to {out}")
    return EXIT_OK


def _cmd_pairs(args) -> int:
    started = _utc_now()
    fields = load_dataset(args.data)
    pairs = make_pairs(fields)
    binned, excluded = bin_pairs(pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_pairs(out, binned)
    _write_run_manifest(
        out,
        "pairs",
        {"data": str(args.data), "n_pairs": len(pairs), "n_binned": n, "n_excluded": len(excluded)},
        [args.data],
        [out],
        started,
    )
    print(f"{len(pairs)} pairs, {n} binned, {len(excluded)} excluded -> {out}")
    return EXIT_OK


def _cmd_split(args) -> int:
    started = _utc_now()
    seed = _resolve_seed(args.seed)
    fields = load_dataset(args.data)
    plan = split_patients(fields, ratio=args.ratio, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(plan.to_json_dict(), sort_keys=True, indent=2) + "\n")
    _write_run_manifest(out, "split", {"ratio": args.ratio, "seed": seed}, [args.data], [out], started)
    print(
        f"{len(plan.train_patients())} train+validation patients in {len(plan.folds)} folds, "
        f"{len(plan.test_patients)} test -> {out}"
    )
    return EXIT_OK


def _load_plan(path) -> SplitPlan:
    return SplitPlan.from_json_dict(json.loads(Path(path).read_text()))


def _phase_winner(runs_dir: Path, phase: str, flag: str) -> str:
    result_path = runs_dir / phase / "phase_result.json"
    if not result_path.is_file():
        raise TrainerError(
            f"no --{flag} given and {result_path} not found; run `train --phase {phase}` first"
        )
    return json.loads(result_path.read_text())["winner"]


def _train_config(args, seed: int) -> TrainConfig:
    widths = args.widths or (PAPER_WIDTHS if args.paper_scale else DESK_WIDTHS)
    epochs = args.epochs if args.epochs is not None else (PAPER_EPOCHS if args.paper_scale else DESK_EPOCHS)
    return TrainConfig(
        epochs=epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=seed,
        widths=widths,
        fc_hidden=args.fc_hidden,
        freeze=args.freeze,
    )


def _cmd_train(args) -> int:
    started = _utc_now()
    seed = _resolve_seed(args.seed)
    cfg = _train_config(args, seed)
    fields = load_dataset(args.data)
    binned = read_pairs(args.pairs, fields)
    plan = _load_plan(args.split)
    runs_dir = Path(args.out)
    runs_dir.mkdir(parents=True, exist_ok=True)
    train_binned = pairs_for_patients(binned, plan.train_patients())

    # worker count is a scheduling knob with no effect on results; it is
    # recorded in the run manifest only, keeping result files byte-stable
    config_echo = cfg.to_json_dict() | {"phase": args.phase}

    if args.phase == PHASE_ARCH:
        bin1 = train_binned[BIN_CENTERS[0]]
        candidates = canonical_specs(in_channels=1, widths=cfg.widths, fc_hidden=cfg.fc_hidden)
        result = select_architecture(candidates, bin1, plan, cfg, runs_dir, args.workers)
        # the comparison table always uses the canonical widths so its
        # parameter column lines up with the published clinical-scale counts
        write_phase_result(
            runs_dir / PHASE_ARCH,
            result,
            {
                "published_comparison": published_comparison(),
                "trained_parameters": {
                    spec.name: count_parameters_spec(spec) for spec in candidates
                },
                "config": config_echo,
            },
        )
        print(f"architecture winner: {result.winner}")
    elif args.phase == PHASE_FEATURES:
        bin1 = train_binned[BIN_CENTERS[0]]
        arch = args.arch or _phase_winner(runs_dir, PHASE_ARCH, "arch")
        arch_spec = spec_from_name(arch, widths=cfg.widths, fc_hidden=cfg.fc_hidden)
        result = select_features(arch_spec, FeatureCombo.all_combos(), bin1, plan, cfg, runs_dir, args.workers)
        write_phase_result(
            runs_dir / PHASE_FEATURES, result, {"architecture": arch, "config": config_echo}
        )
        print(f"feature-combination winner: {result.winner}")
    else:  # intervals
        arch = args.arch or _phase_winner(runs_dir, PHASE_ARCH, "arch")
        combo_name = args.combo or _phase_winner(runs_dir, PHASE_FEATURES, "combo")
        combo = FeatureCombo.parse(combo_name)
        spec = spec_from_name(arch, widths=cfg.widths, fc_hidden=cfg.fc_hidden)
        init_snapshots = None
        if args.chain_init == "features":
            init_snapshots = _features_snapshots(runs_dir, combo_name, len(plan.folds))
        result = train_interval_chain(
            spec, combo, train_binned, plan, cfg, runs_dir, args.workers, init_snapshots
        )
        gaps = [e for e in result.entries if e["gap"]]
        print(
            f"interval chain: {result.n_checkpoints} checkpoints "
            f"({len(gaps)} gaps) under {runs_dir / PHASE_INTERVALS}"
        )

    _write_run_manifest(
        runs_dir, f"train --phase {args.phase}", config_echo | {"workers": args.workers},
        [args.data, args.pairs, args.split], [runs_dir], started,
    )
    return EXIT_OK


def _features_snapshots(runs_dir: Path, combo_name: str, n_folds: int) -> dict[int, dict]:
    snaps = {}
    for fold in range(n_folds):
        ckpt = runs_dir / PHASE_FEATURES / combo_name / f"fold-{fold}"
        if ckpt.is_dir():
            snaps[fold] = load_weights(ckpt).snapshot()
    if not snaps:
        raise TrainerError(
            f"--chain-init features: no checkpoints under {runs_dir / PHASE_FEATURES / combo_name}"
        )
    return snaps


def _cmd_evaluate(args) -> int:
    started = _utc_now()
    fields = load_dataset(args.data)
    binned = read_pairs(args.pairs, fields)
    plan = _load_plan(args.split)
    runs_dir = Path(args.runs)
    combo_name = args.combo or _phase_winner(runs_dir, PHASE_FEATURES, "combo")
    combo = FeatureCombo.parse(combo_name)

    test_binned = pairs_for_patients(binned, plan.test_patients)
    if not any(test_binned.values()):
        raise EvaluationError("no binned pairs for the held-out test patients")
    models_by_bin = load_interval_models(runs_dir)
    if not models_by_bin:
        raise EvaluationError(f"no interval checkpoints under {runs_dir / PHASE_INTERVALS}")

    report = evaluate_testset(
        models_by_bin,
        test_binned,
        combo,
        fields=fields,
        bootstrap_seed=_resolve_seed(args.bootstrap_seed),
        n_bootstrap=args.bootstrap_n,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n")
    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report_csv_rows(report))
    _write_run_manifest(
        out, "evaluate",
        {"combo": combo_name, "bootstrap_seed": _resolve_seed(args.bootstrap_seed),
         "bootstrap_n": args.bootstrap_n},
        [args.data, args.pairs, args.split, args.runs], [out, csv_path], started,
    )
    print(
        f"evaluated {report.n_pairs} pairs ({report.n_skipped} skipped): "
        f"MAE {report.overall['mae']:.3f} dB, RMSE {report.overall['rmse']:.3f} dB -> {out}"
    )
    return EXIT_OK


def _cmd_predict(args) -> int:
    started = _utc_now()
    if not (BIN_CENTERS[0] <= args.interval <= BIN_CENTERS[-1]):
        print(
            f"error: interval outside [{BIN_CENTERS[0]}, {BIN_CENTERS[-1]}]",
            file=sys.stderr,
        )
        return EXIT_USAGE
    center = assign_bin(args.interval)

    if args.field:
        lines = [l for l in Path(args.field).read_text().splitlines() if l.strip()]
        if len(lines) != 1:
            raise DomainError(f"--field file must hold exactly one record, got {len(lines)}")
        field = parse_record(lines[0])
    else:
        if not (args.data and args.patient and args.eye and args.test_index):
            print(
                "error: provide --field FILE or all of --data/--patient/--eye/--test-index",
                file=sys.stderr,
            )
            return EXIT_USAGE
        fields = load_dataset(args.data)
        eye = EYE_FROM_WIRE.get(args.eye, args.eye)
        match = [
            f for f in fields
            if f.patient_id == args.patient and f.eye == eye and f.test_index == args.test_index
        ]
        if not match:
            raise DomainError(
                f"no record for patient {args.patient!r}, eye {args.eye!r}, "
                f"test_index {args.test_index}"
            )
        field = match[0]

    runs_dir = Path(args.runs)
    combo_name = args.combo or _phase_winner(runs_dir, PHASE_FEATURES, "combo")
    combo = FeatureCombo.parse(combo_name)
    models_by_bin = load_interval_models(runs_dir)
    models = models_by_bin.get(center, [])
    if not models:
        raise EvaluationError(f"no trained models for bin {center}")

    forecast = ensemble_predict(models, encode_input(field, combo), bin_center=center)
    values = forecast.exported_values()
    payload = {
        "interval_years": args.interval,
        "bin": center,
        "n_models": forecast.n_models,
        "combo": combo_name,
        "input": {
            "patient_id": field.patient_id,
            "eye": EYE_TO_WIRE[field.eye],
            "test_index": field.test_index,
        },
        "values": [round(values[c], 2) for c in mask_cells()],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _write_run_manifest(
        out, "predict", {"interval": args.interval, "combo": combo_name},
        [args.field or args.data, args.runs], [out], started,
    )
    print(f"forecast at +{args.interval} y (bin {center}, {forecast.n_models} models) -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    started = _utc_now()
    report = json.loads(Path(args.report).read_text())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    md_path = out_dir / "report_md_scatter.csv"
    with open(md_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["predicted_md", "actual_md", "input_md", "bin", "delta_years"])
        for row in report["rows"]["md_scatter"]:
            w.writerow([row["predicted_md"], row["actual_md"], row["input_md"], row["bin"], row["delta_years"]])

    ba_path = out_dir / "report_bland_altman.csv"
    with open(ba_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mean_md", "difference_md", "bin"])
        for row in report["rows"]["bland_altman"]:
            w.writerow([row["mean_md"], row["difference_md"], row["bin"]])

    bin_path = out_dir / "report_bin_mae.csv"
    with open(bin_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "n_pairs", "mae", "mae_ci_low", "mae_ci_high"])
        for entry in report["per_bin"]:
            if entry["mae"] is not None:
                w.writerow([entry["bin"], entry["n_pairs"], entry["mae"], entry["mae_ci"][0], entry["mae_ci"][1]])

    _write_run_manifest(
        out_dir, "report", {"report": str(args.report)}, [args.report],
        [md_path, ba_path, bin_path], started,
    )
    print(f"wrote {md_path.name}, {ba_path.name}, {bin_path.name} under {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="hvfcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hvfcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset_schema = (
        'dataset: JSON lines, one field per line: {"patient_id", "eye": "OD"|"OS", '
        '"gender": "M"|"F", "age", "test_date": "YYYY-MM-DD", "test_index", '
        '"values": [54 dB, row-major over valid cells, 2 decimals]}'
    )

    p = sub.add_parser(
        "simulate",
        help="generate a synthetic longitudinal cohort",
        epilog=f"writes the {dataset_schema}; plus a cohort_meta.json ground-truth sidecar",
    )
    p.add_argument("--patients", type=int, default=200)
    p.add_argument("--tests-min", type=int, default=3)
    p.add_argument("--tests-max", type=int, default=8)
    p.add_argument("--span-min", type=float, default=4.0)
    p.add_argument("--span-max", type=float, default=6.0)
    p.add_argument("--rate-min", type=float, default=0.3)
    p.add_argument("--rate-max", type=float, default=1.5)
    p.add_argument("--archetype", action="append", metavar="NAME=WEIGHT",
                   help="override the archetype mix (repeatable)")
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="dataset JSONL path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser(
        "pairs",
        help="pair and bin a dataset into horizon bins",
        epilog='writes JSON lines {"bin": 1.0..5.5, "input_ref"/"target_ref": '
               '{"patient_id", "eye", "test_index"}, "delta": years}; '
               "gaps under 0.75 or over 5.5 years are excluded",
    )
    p.add_argument("--data", required=True, help=dataset_schema)
    p.add_argument("--out", required=True, help="pairs JSONL path")
    p.set_defaults(func=_cmd_pairs)

    p = sub.add_parser(
        "split",
        help="patient-level train/test split with 10 folds",
        epilog='writes JSON {"seed", "ratio", "test_patients": [...], "folds": [10 lists]}',
    )
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="split-plan JSON path")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser(
        "train",
        help="run one training phase",
        epilog="writes runs/<phase>/<candidate-or-bin>/fold-N/{manifest.json, weights.bin, "
               "history.json} plus phase_result.json or chain_result.json; weights.bin is "
               "little-endian float64 laid out per the manifest entry table",
    )
    p.add_argument("--phase", required=True, choices=[PHASE_ARCH, PHASE_FEATURES, PHASE_INTERVALS])
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="runs directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--widths", type=_parse_widths, default=None, metavar="W0,W1,W2")
    p.add_argument("--fc-hidden", type=int, default=2048)
    p.add_argument("--freeze", choices=["best", "last"], default="best")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"{PAPER_EPOCHS} epochs and widths {','.join(map(str, PAPER_WIDTHS))}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--arch", default=None, help="architecture name (default: arch-phase winner)")
    p.add_argument("--combo", default=None, help="feature combo (default: features-phase winner)")
    p.add_argument("--chain-init", choices=["fresh", "features"], default="fresh",
                   help="how the chain's first bin is initialized")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "evaluate",
        help="fold-ensemble evaluation on the held-out test set",
        epilog="writes report.json (overall MAE/RMSE with bootstrap CIs, MD scatter stats, "
               "Bland-Altman, per-bin MAE, baseline rows, row data) and a CSV with a "
               "`table` column holding the md_scatter / bland_altman / bin_mae surfaces",
    )
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--runs", required=True)
    p.add_argument("--combo", default=None)
    p.add_argument("--bootstrap-seed", type=int, default=None)
    p.add_argument("--bootstrap-n", type=int, default=1000)
    p.add_argument("--out", required=True, help="report JSON path (CSV written beside)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="forecast one field at a horizon")
    p.add_argument("--field", default=None, help="single-record JSONL file")
    p.add_argument("--data", default=None)
    p.add_argument("--patient", default=None)
    p.add_argument("--eye", default=None, help="OD or OS")
    p.add_argument("--test-index", type=int, default=None)
    p.add_argument("--interval", type=float, required=True, help="forecast horizon in years")
    p.add_argument("--runs", required=True)
    p.add_argument("--combo", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("report", help="split a report JSON into plot-ready CSVs")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
