# clims/cli.py
"""
Command-line entry point.

    synth-data   generate a synthetic dataset (images, masks, manifest)
    train        train a CAM network with a chosen loss subset
    eval         initial-CAM mIoU of a checkpoint on a labeled dataset
    ablate       loss-combination ablation (five variants + classification baseline)
    sensitivity  sweep one loss weight and report mIoU per value

Exit codes: 0 success, 1 invalid input (usage, config, data), 2 runtime failure.
Flag values override the config file, which overrides built-in defaults.
"""

import logging
import sys
from pathlib import Path
from typing import Optional

import click
from pydantic import ValidationError

from clims.core.config import TrainConfig, get_settings, load_config
from clims.core.prompts import load_prompt_book, published_prompt_book, save_prompt_book
from clims.exceptions import ClimsValidationError
from clims.extensions import configure_threads, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


# ────────────────────────────────
# Error mapping
# ────────────────────────────────
class ClimsGroup(click.Group):
    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            result = super().main(args=args, prog_name=prog_name, complete_var=complete_var,
                                  standalone_mode=False, **extra)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_VALIDATION)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_VALIDATION)
        except (ClimsValidationError, ValidationError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_VALIDATION)
        except Exception as e:
            logger.exception("Unhandled error")
            click.echo(f"Error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
        code = result if isinstance(result, int) else EXIT_OK
        if standalone_mode:
            sys.exit(code)
        return code


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of numbers, got {text!r}")


def _resolve_config(config_path: Optional[str], **overrides) -> TrainConfig:
    config = load_config(config_path) if config_path else TrainConfig()
    if overrides.get("deterministic") is False:
        overrides["deterministic"] = None
    return config.with_overrides(**overrides)


def _report_artifacts(paths) -> None:
    for p in paths:
        click.echo(str(p))


# ────────────────────────────────
# Commands
# ────────────────────────────────
@click.group(cls=ClimsGroup)
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING (default from CLIMS_LOG_LEVEL).")
def cli(log_level: Optional[str]):
    """CAM training and evaluation with image-text matching losses."""
    settings = get_settings()
    setup_logging(log_level or settings.LOG_LEVEL)
    configure_threads(settings.NUM_WORKERS)


@cli.command("synth-data")
@click.option("--spec", "spec_source", default="default", show_default=True, help="'default' or a SceneSpec JSON file.")
@click.option("--n", "count", type=int, default=200, show_default=True, help="Number of training scenes.")
@click.option("--eval-n", "eval_count", type=int, default=0, show_default=True,
              help="Held-out scenes written to <out>/eval.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the spec seed.")
def cmd_synth_data(spec_source: str, count: int, eval_count: int, out_dir: str, seed: Optional[int]):
    """Generate a synthetic dataset."""
    from clims.synthgen import load_scene_spec, render_scenes, write_dataset

    if count < 0 or eval_count < 0:
        raise click.BadParameter("--n and --eval-n must be >= 0")
    spec = load_scene_spec(spec_source)
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})

    # both splits are drawn before anything is written
    train_scenes = render_scenes(spec, count)
    eval_scenes = render_scenes(spec, eval_count, start_index=count)

    out = Path(out_dir)
    write_dataset(spec, train_scenes, out)
    written = [out]
    if eval_count:
        write_dataset(spec, eval_scenes, out / "eval", start_index=count)
        written.append(out / "eval")
    _report_artifacts(written)


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--losses", default=None, help="Comma list of otm,btm,cbs,reg, or cls alone.")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--deterministic", is_flag=True, default=False)
@click.option("--matcher", "matcher_kind", default="synthetic", show_default=True,
              help="'synthetic' or 'clip:<model-id>'.")
@click.option("--prompts", "prompts_source", default=None,
              help="Prompt book JSON, or 'published' for the shipped train/boat background sets; "
                   "defaults to the dataset's background sets.")
@click.option("--checkpoint", "resume_from", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Resume from this checkpoint.")
def cmd_train(config_path, data_dir, out_dir, seed, losses, epochs, batch_size, learning_rate, deterministic,
              matcher_kind, prompts_source, resume_from):
    """Train a CAM network."""
    from clims.pipeline.train import train
    from clims.pipeline.world import matcher_for, prompt_book_for
    from clims.synthgen import SceneDataset

    config = _resolve_config(
        config_path, seed=seed, losses=losses, epochs=epochs, batch_size=batch_size,
        learning_rate=learning_rate, deterministic=deterministic or get_settings().DETERMINISTIC,
    )
    dataset = SceneDataset.load(data_dir, mode="train")
    if prompts_source == "published":
        book = published_prompt_book(dataset.class_names)
    elif prompts_source:
        book = load_prompt_book(prompts_source)
    else:
        book = prompt_book_for(dataset)
    book.check_classes(dataset.class_names)
    matcher = matcher_for(dataset, matcher_kind) if config.objective != "cls" else None

    out = Path(out_dir)
    checkpoint = train(config, dataset, book, matcher, out, resume_from=resume_from)
    prompts_file = save_prompt_book(book, out / "prompts.json")
    _report_artifacts([checkpoint, out / "train_log.jsonl", prompts_file])


@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", type=float, default=None, help="Fixed background threshold; skips the sweep.")
@click.option("--export-cams", "export_count", type=int, default=4, show_default=True,
              help="Number of images whose CAMs are written as 16-bit PNGs.")
def cmd_eval(checkpoint_path, data_dir, out_dir, threshold, export_count):
    """Initial-CAM mIoU of a checkpoint."""
    from clims.evalkit.cams import export_cams
    from clims.evalkit.metrics import collect_cams, evaluate_cams
    from clims.evalkit.report import render_table, write_report
    from clims.pipeline.checkpoint import load_checkpoint, model_from_state
    from clims.synthgen import SceneDataset

    if threshold is not None and not 0 < threshold < 1:
        raise click.BadParameter("--threshold must lie in (0, 1)")
    dataset = SceneDataset.load(data_dir, mode="eval")
    state = load_checkpoint(checkpoint_path)
    if state.class_names != dataset.class_names:
        raise click.UsageError(f"Checkpoint classes {state.class_names} differ from dataset {dataset.class_names}")

    model = model_from_state(state)
    head = "cam" if state.config.objective == "cls" else "sigmoid"
    cams = collect_cams(model, dataset, head=head)
    summary = evaluate_cams(cams, dataset, threshold=threshold)

    out = Path(out_dir)
    written = write_report(summary, out, "eval")
    for i in range(min(max(export_count, 0), len(cams))):
        written += export_cams(cams[i], out / "cams", f"{i:05d}", dataset.class_names,
                               summary.threshold, state.config_hash)
    click.echo(render_table(summary))
    _report_artifacts(written)


def _experiment_inputs(config_path, data_dir, eval_dir, seed, epochs, batch_size, learning_rate, deterministic):
    from clims.synthgen import SceneDataset

    config = _resolve_config(
        config_path, seed=seed, epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        deterministic=deterministic or get_settings().DETERMINISTIC,
    )
    dataset = SceneDataset.load(data_dir, mode="train")
    eval_dataset = SceneDataset.load(eval_dir or data_dir, mode="eval")
    if eval_dataset.class_names != dataset.class_names:
        raise click.UsageError("Training and evaluation datasets have different classes")
    return config, dataset, eval_dataset


def _experiment_options(f):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False)),
        click.option("--eval-data", "eval_dir", type=click.Path(exists=True, file_okay=False), default=None,
                     help="Held-out labeled split; defaults to --data."),
        click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False)),
        click.option("--seed", type=int, default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--learning-rate", type=float, default=None),
        click.option("--threshold", type=float, default=None),
        click.option("--deterministic", is_flag=True, default=False),
    ]
    for option in reversed(options):
        f = option(f)
    return f


@cli.command("ablate")
@_experiment_options
@click.option("--variants", default=None, help="Comma list; defaults to all six variants.")
def cmd_ablate(config_path, data_dir, eval_dir, out_dir, seed, epochs, batch_size, learning_rate, threshold,
               deterministic, variants):
    """Loss-combination ablation."""
    from clims.evalkit.ablation import DEFAULT_VARIANTS, ablation_run
    from clims.evalkit.report import render_table, write_report

    config, dataset, eval_dataset = _experiment_inputs(
        config_path, data_dir, eval_dir, seed, epochs, batch_size, learning_rate, deterministic)
    names = [v for v in variants.split(",") if v.strip()] if variants else list(DEFAULT_VARIANTS)
    out = Path(out_dir)
    table = ablation_run(config, dataset, names, eval_dataset=eval_dataset, out_dir=out / "runs", threshold=threshold)
    written = write_report(table, out, "ablation")
    click.echo(render_table(table))
    _report_artifacts(written)


@cli.command("sensitivity")
@_experiment_options
@click.option("--param", "parameter", required=True, type=click.Choice(["alpha", "beta", "gamma", "delta"]))
@click.option("--values", "values_text", required=True, help="Comma list, e.g. 28,29.5,31.")
def cmd_sensitivity(config_path, data_dir, eval_dir, out_dir, seed, epochs, batch_size, learning_rate, threshold,
                    deterministic, parameter, values_text):
    """Sweep one loss weight."""
    from clims.evalkit.ablation import sensitivity_run
    from clims.evalkit.report import render_table, write_report

    values = _floats(values_text)
    config, dataset, eval_dataset = _experiment_inputs(
        config_path, data_dir, eval_dir, seed, epochs, batch_size, learning_rate, deterministic)
    out = Path(out_dir)
    table = sensitivity_run(config, dataset, parameter, values, eval_dataset=eval_dataset,
                            out_dir=out / "runs", threshold=threshold)
    written = write_report(table, out, f"sensitivity_{parameter}")
    click.echo(render_table(table))
    _report_artifacts(written)


def main() -> None:
    cli()
