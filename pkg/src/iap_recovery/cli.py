"""
IAP Recovery CLI - cohort generation, training, evaluation, cohort analysis and routing
Usage: iap-recovery <command> [options]

Exit codes: 0 success, 1 computation failure (e.g. non-finite loss), 2 usage or I/O error.
"""
import argparse
import logging
import platform
import sys
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .__about__ import __version__
from .analysis.cohort import (
    OVERLAP_SCOPES,
    format_overlap_table,
    histograms_frame,
    overlap_table,
    spearman_matrix,
    value_histogram,
)
from .analysis.plots import (
    plot_example_predictions,
    plot_heatmap,
    plot_histograms,
    plot_training_curve,
    save_figure,
)
from .analysis.report import build_report, format_report, write_report
from .core.checkpoint import Checkpoint, IapPredictor, load_checkpoint
from .core.model import PRESETS, SCHEDULES, TrainConfig
from .core.schema import (
    DESK_SCHEMA,
    FULL_SCHEMA,
    IapSchema,
    apply_regression_variant,
    decode_batch,
    load_bundled_schema,
    load_schema,
    save_schema,
)
from .core.trainer import train
from .data.ingestion import (
    DEFAULT_FRACTIONS,
    SUBSETS,
    SliceRecord,
    SplitAssignment,
    exclude_incomplete,
    load_manifest,
    load_split,
    preprocess_records,
    save_split,
    split_by_patient,
)
from .data.phantom import LABEL_RULES, IapSampler, PhantomSpec, generate_cohort
from .exceptions import IapError, TrainingError
from .routing.router import (
    default_route_table,
    format_routing_table,
    load_domain_models,
    load_route_table,
    model_domains,
    run_routing_experiment,
    save_route_table,
    train_domain_models,
    write_routing_result,
)
from .utils import ensure_output_dir, sha256_file, write_json

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0
BUNDLED_SCHEMAS = {"desk": DESK_SCHEMA, "full": FULL_SCHEMA}
OUTPUTS_NAME = "outputs.json"
METADATA_NAME = "run_metadata.json"
SPLIT_NAME = "split.json"
SCHEMA_NAME = "schema.json"
EXAMPLES_NAME = "example_predictions.png"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


@dataclass(frozen=True)
class RunConfig:
    """Resolved invocation: command, paths, seed, fractions and training overrides."""

    command: str
    out: Path
    seed: int = DEFAULT_SEED
    manifest: Optional[Path] = None
    schema: Optional[str] = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    overrides: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        overrides = {
            k: getattr(args, k)
            for k in ("epochs", "batch_size", "learning_rate", "weight_decay", "lam", "eta", "num_workers", "device")
            if getattr(args, k, None) is not None
        }
        manifest = getattr(args, "manifest", None)
        return cls(
            command=args.command,
            out=Path(args.out),
            seed=args.seed,
            manifest=Path(manifest) if manifest else None,
            schema=getattr(args, "schema", None),
            fractions=tuple(getattr(args, "fractions", DEFAULT_FRACTIONS)),
            overrides=overrides,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["out"] = str(self.out)
        data["manifest"] = str(self.manifest) if self.manifest else None
        data["fractions"] = list(self.fractions)
        return data


def parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be three numbers like 0.7,0.15,0.15, got '{text}'") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"fractions needs exactly three values, got {len(values)}")
    return values


def parse_names(text: str) -> list[str]:
    return [n.strip() for n in text.split(",") if n.strip()]


def parse_weights(text: str) -> tuple[str, list[float]]:
    name, _, values = text.partition("=")
    try:
        return name.strip(), [float(v) for v in values.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must look like NAME=w1,w2,..., got '{text}'") from None


def resolve_schema(args: argparse.Namespace) -> IapSchema:
    """--schema is a bundled asset name (desk, full) or a path; --regress-iaps applies the regression variant."""
    choice = getattr(args, "schema", None) or "desk"
    schema = load_bundled_schema(BUNDLED_SCHEMAS[choice]) if choice in BUNDLED_SCHEMAS else load_schema(choice)
    regress = getattr(args, "regress_iaps", None)
    if regress:
        schema = apply_regression_variant(schema, regress)
        logger.info(f"Training {regress} as continuous heads")
    return schema


def train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig.preset(args.preset).replace(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        lr_schedule=args.lr_schedule,
        lam=args.lam,
        eta=args.eta,
        num_workers=args.num_workers,
        device=args.device,
        seed=args.seed,
    )


def load_complete_records(manifest: str, schema: IapSchema):
    records = load_manifest(manifest, schema)
    kept, excluded = exclude_incomplete(records, schema)
    if excluded:
        print(f"⚠ Excluded {len(excluded)} patient(s) with missing IAP values")
    return kept


def resolve_split(args: argparse.Namespace, records) -> SplitAssignment:
    if getattr(args, "split_file", None):
        return load_split(args.split_file, records)
    return split_by_patient(records, args.fractions, seed=args.seed)


def finish_run(out_dir: Path, config: RunConfig, files: list[Path]) -> None:
    """Record produced files with checksums, plus run metadata (the only timestamped file)."""
    outputs = {}
    for path in sorted(set(files)):
        try:
            key = path.relative_to(out_dir).as_posix()
        except ValueError:
            key = str(path)
        outputs[key] = sha256_file(path)
    write_json(out_dir / OUTPUTS_NAME, {"command": config.command, "files": outputs})
    write_json(
        out_dir / METADATA_NAME,
        {
            "run": config.to_dict(),
            "version": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    )


def echo_config(config: TrainConfig) -> None:
    print("Training config:")
    for key, value in config.to_dict().items():
        print(f"  {key}: {value}")
    print()


def cmd_generate(args: argparse.Namespace) -> int:
    """Render a phantom cohort and its manifest."""
    schema = resolve_schema(args)
    out_dir = ensure_output_dir(Path(args.out))
    spec = PhantomSpec.for_schema(schema, image_size=args.image_size)
    sampler = IapSampler(schema, weights=dict(args.weights or []))

    print("=== Generating Phantom Cohort ===")
    print()
    cohort = generate_cohort(
        out_dir,
        n_patients=args.patients,
        slices_per_patient=args.slices,
        sampler=sampler,
        spec=spec,
        seed=args.seed,
        missing_fraction=args.missing_fraction,
        label_rule=args.label_rule,
        domain_iap=args.domain_iap,
    )

    print(f"✓ Patients: {args.patients}")
    print(f"✓ Slices: {len(cohort.records)}")
    print(f"  Blanked patients: {len(cohort.blanked_patients)}")
    print(f"  Manifest: {cohort.manifest_path}")

    files = [cohort.manifest_path, cohort.provenance_path] + [Path(r.image_ref) for r in cohort.records]
    finish_run(out_dir, RunConfig.from_args(args), files)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train the IAP predictor on the train split and keep the best-validation checkpoint."""
    schema = resolve_schema(args)
    config = train_config(args)
    out_dir = ensure_output_dir(Path(args.out))
    echo_config(config)

    records = load_complete_records(args.manifest, schema)
    split = resolve_split(args, records)
    files = [save_split(split, out_dir / SPLIT_NAME), save_schema(schema, out_dir / SCHEMA_NAME)]

    checkpoint = train(config, schema, split.train, split.val, out_dir=out_dir)
    files += [out_dir / "checkpoint.pt", out_dir / "training_curve.csv"]
    files.append(save_figure(plot_training_curve(checkpoint.curve), out_dir / "training_curve.png"))

    print(f"✓ Best validation loss {checkpoint.best_val_loss:.6f} at epoch {checkpoint.epoch}")
    print(f"  Checkpoint: {out_dir / 'checkpoint.pt'}")
    finish_run(out_dir, RunConfig.from_args(args), files)
    return EXIT_OK


def write_example_predictions(checkpoint: Checkpoint, records: Sequence[SliceRecord], path: Path, count: int) -> Path:
    """Figure of evenly spaced slices from records with predicted and true IAPs."""
    picks = sorted({int(i) for i in np.linspace(0, len(records) - 1, min(count, len(records)))})
    chosen = [records[i] for i in picks]
    predictor = IapPredictor(checkpoint)
    images = preprocess_records(chosen, predictor.image_size)
    decoded = decode_batch(predictor.predict_images(images), predictor.schema)
    truths = [{d.name: d.parse(r.iap_values.get(d.name)) for d in predictor.schema.descriptors} for r in chosen]
    return save_figure(plot_example_predictions(images, decoded, truths, predictor.schema), path)


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Per-IAP metrics of a checkpoint on held-out patients."""
    checkpoint = load_checkpoint(args.checkpoint)
    schema = resolve_schema(args) if args.schema or args.regress_iaps else checkpoint.schema
    out_dir = ensure_output_dir(Path(args.out))

    records = load_complete_records(args.manifest, schema)
    subset = resolve_split(args, records).subset(args.subset)
    report = build_report(checkpoint, subset, schema)

    print(format_report(report))
    files = write_report(report, out_dir)
    if args.examples > 0:
        files.append(write_example_predictions(checkpoint, subset, out_dir / EXAMPLES_NAME, args.examples))
    finish_run(out_dir, RunConfig.from_args(args), files)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    """Histograms, Spearman heatmaps and IAP-combination overlap per subset."""
    schema = resolve_schema(args)
    out_dir = ensure_output_dir(Path(args.out))
    records = load_complete_records(args.manifest, schema)
    split = resolve_split(args, records)
    subsets = {name: split.subset(name) for name in SUBSETS}
    files = []

    histograms = []
    for name in schema.names:
        panels = [value_histogram(subsets[s], name, schema, subset=s) for s in SUBSETS]
        histograms += panels
        files.append(save_figure(plot_histograms(name, panels), out_dir / f"histogram_{name}.png"))
    histograms_path = out_dir / "histograms.csv"
    histograms_frame(histograms).to_csv(histograms_path, index=False)
    files.append(histograms_path)

    for subset_name, subset in subsets.items():
        if len(subset) < 2:
            logger.warning(f"Subset '{subset_name}' has {len(subset)} slice(s); skipping its correlation matrix")
            continue
        correlations = spearman_matrix(subset, schema)
        matrix_path = out_dir / f"spearman_{subset_name}.csv"
        correlations.to_frame().to_csv(matrix_path, float_format="%.10g")
        files.append(matrix_path)
        files.append(save_figure(plot_heatmap(correlations, subset_name), out_dir / f"heatmap_{subset_name}.png"))

    overlap_text = format_overlap_table(overlap_table(subsets, schema, scope=args.overlap_scope))
    overlap_path = out_dir / "overlap.txt"
    overlap_path.write_text(overlap_text)
    files.append(overlap_path)

    print(f"=== Unique IAP combinations ({args.overlap_scope} IAPs) ===")
    print(overlap_text)
    finish_run(out_dir, RunConfig.from_args(args), files)
    return EXIT_OK


def cmd_route(args: argparse.Namespace) -> int:
    """Route held-out slices to domain models by predicted IAPs and compare with fixed and oracle choice."""
    predictor = IapPredictor.from_path(args.iap_checkpoint)
    schema = predictor.schema
    out_dir = ensure_output_dir(Path(args.out))
    table = load_route_table(args.route_table) if args.route_table else default_route_table(schema, args.domain_iap)
    table.validate(schema)
    files = [save_route_table(table, out_dir / "route_table.json")]

    records = load_complete_records(args.manifest, schema)
    split = resolve_split(args, records)

    domains = None
    if args.models_dir:
        domain_models = load_domain_models(args.models_dir, table.model_ids)
    else:
        domains = model_domains(table, schema, args.domain_iap)
        for mid, values in domains.items():
            logger.info(f"Model {mid} serves {args.domain_iap} in {list(values)}")
        config = train_config(args)
        echo_config(config)
        models_dir = out_dir / "domain_models"
        domain_models = train_domain_models(
            split.train, args.domain_iap, schema, config, out_dir=models_dir, domains=domains
        )
        files += [models_dir / mid / "checkpoint.pt" for mid in domain_models]

    result = run_routing_experiment(
        split.test, predictor, domain_models, table, domain_iap=args.domain_iap, domains=domains
    )
    print(format_routing_table(result))
    files += write_routing_result(result, out_dir)
    finish_run(out_dir, RunConfig.from_args(args), files)
    return EXIT_OK


def add_common(parser: argparse.ArgumentParser, manifest: bool = True) -> None:
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"Root seed (default: {DEFAULT_SEED})")
    parser.add_argument("--schema", help="Bundled schema (desk, full) or path to a schema JSON (default: desk)")
    parser.add_argument("--regress-iaps", type=parse_names, help="Categorical IAPs to train as continuous, comma-separated")
    if manifest:
        parser.add_argument("--manifest", required=True, help="Slice manifest CSV")
        parser.add_argument(
            "--fractions",
            type=parse_fractions,
            default=DEFAULT_FRACTIONS,
            help="Train,val,test patient fractions (default: 0.7,0.15,0.15)",
        )
        parser.add_argument("--split-file", help="Reuse a split.json instead of re-deriving the split")


def add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=PRESETS, default="full", help="Training recipe; paper is an alias of full (default: full)")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--learning-rate", "--lr", type=float)
    parser.add_argument("--weight-decay", type=float)
    parser.add_argument("--lr-schedule", choices=SCHEDULES, help="Per-step learning-rate schedule (default: per preset)")
    parser.add_argument("--lam", type=float, help="Weight of the categorical loss terms")
    parser.add_argument("--eta", type=float, help="Weight of the continuous loss terms")
    parser.add_argument("--num-workers", type=int)
    parser.add_argument("--device", help="Torch device (default: $IAP_DEVICE or cpu)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iap-recovery", description="MRI image acquisition parameter recovery")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging and tracebacks")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    generate = subparsers.add_parser("generate", help="Generate a synthetic phantom cohort")
    add_common(generate, manifest=False)
    generate.add_argument("--patients", type=int, default=20)
    generate.add_argument("--slices", type=int, default=10, help="Slices per patient")
    generate.add_argument("--image-size", type=int, default=64)
    generate.add_argument("--missing-fraction", type=float, default=0.0, help="Share of patients with one IAP blanked")
    generate.add_argument("--label-rule", choices=LABEL_RULES, default="none")
    generate.add_argument("--domain-iap", default="manufacturer")
    generate.add_argument(
        "--weights", type=parse_weights, action="append", help="Category sampling weights, NAME=w1,w2,... (repeatable)"
    )

    train_parser = subparsers.add_parser("train", help="Train the IAP predictor")
    add_common(train_parser)
    add_training(train_parser)

    evaluate = subparsers.add_parser("evaluate", help="Evaluate a checkpoint per IAP")
    add_common(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--subset", choices=SUBSETS, default="test")
    evaluate.add_argument("--examples", type=int, default=8, help="Slices in example_predictions.png (0 to skip)")

    analyze = subparsers.add_parser("analyze", help="Cohort histograms, correlations and overlap")
    add_common(analyze)
    analyze.add_argument("--overlap-scope", choices=OVERLAP_SCOPES, default="all")

    route = subparsers.add_parser("route", help="Routing experiment with domain models")
    add_common(route)
    add_training(route)
    route.add_argument("--iap-checkpoint", required=True)
    route.add_argument("--route-table", help="Route table JSON (default: one rule per domain value)")
    route.add_argument("--domain-iap", default="manufacturer")
    route.add_argument("--models-dir", help="Load <dir>/<model>/checkpoint.pt instead of training domain models")

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    commands = {
        "generate": cmd_generate,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "analyze": cmd_analyze,
        "route": cmd_route,
    }

    try:
        return commands[args.command](args)
    except TrainingError as e:
        logger.error(f"✗ {e}", exc_info=args.verbose)
        return EXIT_FAILURE
    except (IapError, OSError) as e:
        logger.error(f"✗ {e}", exc_info=args.verbose)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
