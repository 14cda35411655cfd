"""
Command Line Interface for PRDL

Wires the stages together: synthetic data generation, pretraining,
distribution extraction, MIL training and evaluation, plus the gradient
check and mask-similarity diagnostics.
"""

import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from colorama import Fore, Style, init

from .checkpoint import load_checkpoint
from .config import AUG_MODES, RunConfig, load_config, write_resolved_config
from .gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, run_gradcheck_suite
from .mil import evaluate, load_mil_model, save_mil_model, train_mil
from .models.prompt import OPERATOR_NAMES
from .network import mask_similarity
from .store import extract_distributions, load, persist
from .synthetic import (
    gen_synthetic,
    linear_probe_accuracy,
    pretrain_images,
    read_dataset,
    read_splits,
    write_dataset,
)
from .trainer import pretrain as run_pretrain
from .utils.seeding import derive_rng

# Initialize colorama for cross-platform colored output
init()

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def print_success(message: str) -> None:
    """Print success message in green."""
    click.echo(f"{Fore.GREEN}✓ {message}{Style.RESET_ALL}")


def print_error(message: str) -> None:
    """Print error message in red."""
    click.echo(f"{Fore.RED}✗ {message}{Style.RESET_ALL}", err=True)


def print_warning(message: str) -> None:
    """Print warning message in yellow."""
    click.echo(f"{Fore.YELLOW}⚠ {message}{Style.RESET_ALL}")


def print_info(message: str) -> None:
    """Print info message in blue."""
    click.echo(f"{Fore.BLUE}ℹ {message}{Style.RESET_ALL}")


def fail(stage: str, error: Exception) -> None:
    """Report ``error`` and exit: 1 for validation errors, 2 for everything else."""
    print_error(f"{stage} failed: {error}")
    logger.debug(f"{stage} failed", exc_info=True)
    sys.exit(1 if isinstance(error, ValueError) else 2)


def prepare_config(
    config_path: Optional[str], out: Optional[str], overrides: Dict[str, Any]
) -> RunConfig:
    """Resolve the config, print its hash and echo it to ``out``."""
    cfg = load_config(config_path, overrides)
    print_info(f"Config hash: {cfg.config_hash()}")
    if out:
        write_resolved_config(cfg, out)
    return cfg


def write_metrics(rows: Sequence[Dict[str, Any]], out_dir: Path, name: str = "metrics.jsonl") -> Path:
    """Write metric rows as JSON lines, replacing any earlier file, and echo them as a table."""
    path = out_dir / name
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    click.echo(f"\n{Style.BRIGHT}{'method':<16}{'seed':>6}  {'split':<6}{'AUC':>8}{'F1':>8}{'ACC':>8}{'n':>6}{Style.RESET_ALL}")
    for row in rows:
        click.echo(
            f"{row['method']:<16}{row['seed']:>6}  {row['split']:<6}"
            f"{row['auc']:>8.4f}{row['f1']:>8.4f}{row['accuracy']:>8.4f}{row['count']:>6}"
        )
    return path


def similarity_csv(matrix: Sequence[Sequence[float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["operator", *OPERATOR_NAMES])
    for name, row in zip(OPERATOR_NAMES, matrix):
        writer.writerow([name, *(repr(float(v)) for v in row)])
    return buffer.getvalue()


config_option = click.option(
    "--config", "-c", "config_path", type=click.Path(exists=True, dir_okay=False),
    help="JSON or YAML run configuration",
)
threads_option = click.option(
    "--threads", type=click.IntRange(min=1), default=1, show_default=True,
    help="Worker threads",
)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
@click.option("--quiet", "-q", is_flag=True, help="Suppress non-error output")
def cli(verbose: bool, quiet: bool) -> None:
    """PRDL - promptable representation distribution learning and PRS-augmented MIL."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif quiet:
        logging.getLogger().setLevel(logging.ERROR)


@cli.command("gen-data")
@config_option
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--seed", type=int, help="Overrides the config seed")
def gen_data(config_path: Optional[str], out: str, seed: Optional[int]) -> None:
    """Generate the synthetic bag benchmark."""
    try:
        cfg = prepare_config(config_path, out, {"seed": seed})
        dataset = gen_synthetic(cfg.data, derive_rng(cfg.seed, "data"))
        write_dataset(dataset, out)

        chance = 1.0 / cfg.data.num_classes
        probe = linear_probe_accuracy(dataset)
        if probe > chance:
            print_info(f"Linear probe accuracy {probe:.3f} (chance {chance:.3f})")
        else:
            logger.warning(f"Linear probe accuracy {probe:.3f} does not beat chance {chance:.3f}")
            print_warning(f"Classes may not be separable: probe accuracy {probe:.3f}")

        sizes = ", ".join(f"{name}={len(bags)}" for name, bags in dataset.splits().items())
        print_success(f"Dataset written to {out} ({sizes})")
    except Exception as e:
        fail("Data generation", e)


@cli.command()
@config_option
@click.option("--data", "-d", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--seed", type=int, required=True, help="Training seed")
@threads_option
def pretrain(config_path: Optional[str], data: str, out: str, seed: int, threads: int) -> None:
    """Pretrain the PRDL encoder, distribution heads and mask matrix."""
    try:
        cfg = prepare_config(config_path, out, {"seed": seed})
        dataset = read_dataset(data)
        images = pretrain_images(
            dataset, cfg.pretrain.max_images, derive_rng(seed, "pretrain-images")
        )
        print_info(f"Pretraining on {len(images)} patches for {cfg.pretrain.epochs} epochs")
        result = run_pretrain(cfg, images, out, seed=seed, threads=threads)
        print_info(f"final_eval_loss = {result.final_eval_loss!r}")
        print_success(f"Checkpoint written to {result.checkpoint_path}")
    except Exception as e:
        fail("Pretraining", e)


@cli.command()
@config_option
@click.option("--data", "-d", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Pretrained checkpoint")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@threads_option
def extract(config_path: Optional[str], data: str, checkpoint: str, out: str, threads: int) -> None:
    """Extract per-patch distributions into a PRSD store."""
    try:
        prepare_config(config_path, out, {})
        dataset = read_dataset(data)
        store = extract_distributions(checkpoint, dataset.all_bags(), threads)
        path = persist(store, Path(out) / "store.prsd")
        print_success(f"Store written to {path} ({len(store)} bags, D={store.dim})")
    except Exception as e:
        fail("Extraction", e)


@cli.command("train-mil")
@config_option
@click.option("--store", "store_path", required=True, type=click.Path(dir_okay=False), help="PRSD store")
@click.option("--data", "-d", required=True, type=click.Path(file_okay=False), help="Dataset directory (splits)")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--seed", type=int, required=True, help="Training seed")
@click.option("--aug", help=f"Augmentation mode: {', '.join(AUG_MODES)}")
@threads_option
def train_mil_command(
    config_path: Optional[str],
    store_path: str,
    data: str,
    out: str,
    seed: int,
    aug: Optional[str],
    threads: int,
) -> None:
    """Train the attention-MIL head on stored representations."""
    if aug is not None and aug not in AUG_MODES:
        print_error(f"Invalid --aug '{aug}'. Valid modes: {', '.join(AUG_MODES)}")
        sys.exit(1)
    try:
        cfg = prepare_config(config_path, out, {"seed": seed, "mil.aug": aug})
        store = load(store_path, cfg.store.use_mmap)
        splits = read_splits(data)
        model = train_mil(store, splits, cfg.mil, cfg.mil.aug, seed, cfg.store)
        model_path = save_mil_model(model, Path(out) / "model.pmil")

        rows: List[Dict[str, Any]] = []
        for split in ("val", "test"):
            if splits[split]:
                metrics = evaluate(model, store, splits[split], threads=threads)
                rows.append({"method": cfg.mil.aug, "seed": seed, "split": split, **metrics.to_dict()})
        write_metrics(rows, Path(out))
        print_success(f"MIL model written to {model_path}")
    except Exception as e:
        fail("MIL training", e)


@cli.command("eval")
@config_option
@click.option("--store", "store_path", required=True, type=click.Path(dir_okay=False), help="PRSD store")
@click.option("--data", "-d", required=True, type=click.Path(file_okay=False), help="Dataset directory (splits)")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False), help="Saved MIL model")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--split", "splits_to_score", multiple=True, default=("test",), show_default=True)
@click.option("--method", default="eval", show_default=True, help="Label for the metric rows")
@click.option("--seed", type=int, help="Seed recorded in the metric rows")
@threads_option
def eval_command(
    config_path: Optional[str],
    store_path: str,
    data: str,
    model_path: str,
    out: str,
    splits_to_score: Sequence[str],
    method: str,
    seed: Optional[int],
    threads: int,
) -> None:
    """Evaluate a saved MIL model with mean representations."""
    try:
        cfg = prepare_config(config_path, out, {"seed": seed})
        store = load(store_path, cfg.store.use_mmap)
        splits = read_splits(data)
        model = load_mil_model(model_path)
        rows = []
        for split in splits_to_score:
            if split not in splits:
                raise ValueError(f"Unknown split '{split}', expected one of {', '.join(splits)}")
            metrics = evaluate(model, store, splits[split], threads=threads)
            rows.append({"method": method, "seed": cfg.seed, "split": split, **metrics.to_dict()})
        path = write_metrics(rows, Path(out), "eval_metrics.jsonl")
        print_success(f"Metrics written to {path}")
    except Exception as e:
        fail("Evaluation", e)


@cli.command()
@config_option
@click.option("--seed", type=int, default=0, show_default=True, help="Root seed")
@click.option("--n-seeds", type=click.IntRange(min=1), default=20, show_default=True, help="Instances per case")
@click.option("--step", "h", type=float, default=DEFAULT_STEP, show_default=True, help="Finite-difference step")
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, show_default=True)
@click.option("--out", "-o", type=click.Path(file_okay=False), help="Write gradcheck_report.json here")
def gradcheck(
    config_path: Optional[str],
    seed: int,
    n_seeds: int,
    h: float,
    tolerance: float,
    out: Optional[str],
) -> None:
    """Compare analytic and finite-difference gradients for every primitive and loss."""
    try:
        prepare_config(config_path, out, {"seed": seed})
        results = run_gradcheck_suite(seed, n_seeds, h, tolerance)
        failures = [r for r in results if not r.report.passed]

        worst: Dict[str, float] = {}
        for r in results:
            worst[r.case] = max(worst.get(r.case, 0.0), r.report.max_relative_error)
        for case, error in worst.items():
            click.echo(f"  {case:<16} worst relative error {error:.2e}")
        if out:
            report = {"seed": seed, "n_seeds": n_seeds, "step": h, "tolerance": tolerance,
                      "worst": worst, "failures": [[r.case, r.seed] for r in failures]}
            with open(Path(out) / "gradcheck_report.json", "w", encoding="utf-8") as f:
                json.dump(report, f, indent=2, sort_keys=True)

        if failures:
            for r in failures:
                print_error(f"{r.case} (instance {r.seed}): relative error {r.report.max_relative_error:.2e}")
            raise ValueError(f"{len(failures)} of {len(results)} gradient checks failed")
        print_success(f"All {len(results)} gradient checks passed")
    except Exception as e:
        fail("Gradient check", e)


@cli.command("mask-sim")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Pretrained checkpoint")
@click.option("--store", "store_path", type=click.Path(dir_okay=False), help="PRSD store (mask copy)")
@click.option("--out", "-o", type=click.Path(file_okay=False), help="Write mask_similarity.csv here")
@config_option
def mask_sim(
    checkpoint: Optional[str], store_path: Optional[str], out: Optional[str], config_path: Optional[str]
) -> None:
    """Print the K x K cosine similarity of the mask matrix rows as CSV."""
    if (checkpoint is None) == (store_path is None):
        print_error("Pass exactly one of --checkpoint or --store")
        sys.exit(1)
    try:
        prepare_config(config_path, out, {})
        mask = load_checkpoint(checkpoint).student.mask if checkpoint else load(store_path).mask
        text = similarity_csv(mask_similarity(mask))
        click.echo(text, nl=False)
        if out:
            path = Path(out) / "mask_similarity.csv"
            path.write_text(text, encoding="utf-8")
            print_success(f"Similarity matrix written to {path}")
    except Exception as e:
        fail("Mask similarity", e)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
