"""Command-line interface: ``seqemo synth|extract|train|xval|eval|predict``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All randomness is
driven by ``--seed``. Every command that writes outputs also writes the
resolved ``config.json`` next to them; pass it back with ``--config`` to
rerun with the same settings.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data_io import SynthSpec, generate_synth_dataset, load_manifest, read_wav
from .dsp import mfcc_extract
from .errors import SeqEmoError
from .evaluation import EvalReport, emit_cv_summary, emit_report
from .models import ARCHITECTURES, Model, build_architecture, load_checkpoint, save_checkpoint
from .numeric import OptimizerConfig, derive_seed
from .pipeline import extract_to_cache, load_dataset
from .training import FoldPlan, Normalizer, TrainConfig, cross_validate, fit_fold, predict_proba

log = logging.getLogger("seqemo")


def _write_config(out_dir: Path, command: str, params: dict) -> None:
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items() if k != "config"}
    payload = {"command": command, "version": __version__, "params": resolved}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(ctx, param, value):
    if value is None:
        return value
    try:
        payload = json.loads(Path(value).read_text(encoding="utf-8"))
        params = payload["params"]
    except (OSError, ValueError, KeyError) as exc:
        raise click.BadParameter(f"cannot read config file: {exc}", ctx=ctx, param=param)
    if payload.get("command") not in (None, ctx.info_name):
        raise click.BadParameter(f"config was written by '{payload.get('command')}', not '{ctx.info_name}'", ctx=ctx, param=param)
    ctx.default_map = {**(ctx.default_map or {}), **params}
    return value


config_option = click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    callback=_load_config,
    is_eager=True,
    expose_value=True,
    help="Load option defaults from a config.json written by a previous run.",
)


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


def runtime_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SeqEmoError as exc:
            _fail(exc)

    return wrapper


def training_options(fn):
    options = [
        click.option("--data", required=True, type=click.Path(exists=True), help="WAV manifest CSV or feature-cache directory."),
        click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory."),
        click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0)),
        click.option("--epochs", default=100, show_default=True, type=click.IntRange(min=1)),
        click.option("--patience", default=10, show_default=True, type=click.IntRange(min=0)),
        click.option("--batch-size", default=32, show_default=True, type=click.IntRange(min=1)),
        click.option("--lr", default=0.001, show_default=True, type=click.FloatRange(min=0, min_open=True)),
        click.option("--beta1", default=0.9, show_default=True, type=click.FloatRange(0, 1, min_open=True, max_open=True)),
        click.option("--beta2", default=0.999, show_default=True, type=click.FloatRange(0, 1, min_open=True, max_open=True)),
        click.option("--validation-fraction", default=0.1, show_default=True, type=click.FloatRange(0, 0.5)),
        click.option("--padding-mode", default="global_max", show_default=True, type=click.Choice(["global_max", "per_batch"])),
        click.option("--mask-attention/--no-mask-attention", default=False, show_default=True, help="Exclude padded frames from sequence pooling."),
        click.option("--normalize/--no-normalize", default=True, show_default=True, help="Per-coefficient standardization fitted on training data."),
        click.option("--clip-norm", default=None, type=click.FloatRange(min=0, min_open=True), help="Global gradient-norm clip (off by default)."),
        click.option("--width-scale", default=1.0, show_default=True, type=click.FloatRange(min=0, min_open=True), help="Scale every layer width (1.0 = full-size reference model)."),
        click.option("--clstm-dropout", default=0.0, show_default=True, type=click.FloatRange(0, 1, max_open=True), help="Dropout between CLSTM layers."),
        click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1)),
        config_option,
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _train_config(p: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=p["batch_size"],
        optimizer=OptimizerConfig(learning_rate=p["lr"], beta1=p["beta1"], beta2=p["beta2"]),
        max_epochs=p["epochs"],
        early_stop_patience=p["patience"],
        seed=p["seed"],
        padding_mode=p["padding_mode"],
        mask_attention=p["mask_attention"],
        validation_fraction=p["validation_fraction"],
        normalize=p["normalize"],
        clip_norm=p["clip_norm"],
    )


@click.group()
@click.version_option(__version__, prog_name="seqemo")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for per-epoch logs.")
def main(verbose):
    """Speech-emotion sequence classification: MFCC front end, CNN and attention CNN-BLSTM models."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--classes", "num_classes", default=6, show_default=True, type=click.IntRange(2, 6))
@click.option("--per-class", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--min-duration", default=1.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--max-duration", default=4.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--noise", default=0.02, show_default=True, type=click.FloatRange(min=0))
@click.option("--speakers", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@config_option
@runtime_errors
def synth(out, num_classes, per_class, min_duration, max_duration, noise, speakers, seed, config):
    """Generate the synthetic prosody dataset (WAVs + manifest.csv)."""
    spec = SynthSpec(num_classes, per_class, min_duration, max_duration, seed, noise, speakers)
    out = Path(out)
    manifest = generate_synth_dataset(spec, out)
    _write_config(out, "synth", click.get_current_context().params)
    click.echo(f"wrote {len(manifest.entries)} files and {out / 'manifest.csv'}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--resample/--no-resample", default=False, help="Linearly resample non-16 kHz audio (lossy).")
@config_option
@runtime_errors
def extract(manifest, out, workers, resample, config):
    """Compute MFCC feature caches for every file in a manifest."""
    out = Path(out)
    result = extract_to_cache(load_manifest(manifest), out, workers, resample)
    _write_config(out, "extract", click.get_current_context().params)
    click.echo(f"cached {result.written} feature files in {out}")
    if result.errors:
        for err in result.errors:
            click.echo(f"error: {err}", err=True)
        click.echo(f"{len(result.errors)} file(s) failed", err=True)
        sys.exit(1)


@main.command()
@click.option("--arch", default="clstm-attn", show_default=True, type=click.Choice(ARCHITECTURES))
@training_options
@runtime_errors
def train(arch, **p):
    """Train one model on all data (minus the validation hold-out)."""
    cfg = _train_config(p)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(p["data"], p["workers"])
    spec = build_architecture(arch, len(dataset.class_names), p["width_scale"], p["clstm_dropout"])
    pad_to = int(dataset.lengths.max()) if cfg.padding_mode == "global_max" else None
    model, history, normalizer = fit_fold(spec, dataset, np.arange(len(dataset)), cfg, derive_seed(cfg.seed, 100), pad_to)
    metadata = {
        "arch": arch,
        "seed": cfg.seed,
        "epoch": history.best_epoch + 1,
        "fold": None,
        "class_names": dataset.class_names,
        "normalizer": normalizer.to_dict(),
        "mask_attention": cfg.mask_attention,
        "pad_frames": pad_to,
    }
    save_checkpoint(model, out / "model.ckpt", metadata)
    history.write(out / "history.tsv")
    _write_config(out, "train", {"arch": arch, **p})
    click.echo(f"trained {spec.name} for {history.epochs} epochs (best {history.best_epoch + 1}); wrote {out / 'model.ckpt'}")


@main.command()
@click.option("--arch", multiple=True, default=["clstm-attn"], show_default=True, type=click.Choice(ARCHITECTURES), help="Repeat to compare architectures side by side.")
@click.option("--folds", default=5, show_default=True, type=click.IntRange(min=2))
@click.option("--fold-mode", default="stratified_random", show_default=True, type=click.Choice(["stratified_random", "speaker_grouped"]))
@training_options
@runtime_errors
def xval(arch, folds, fold_mode, **p):
    """k-fold cross-validation with per-fold reports and a fold/Average summary table."""
    cfg = _train_config(p)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(p["data"], p["workers"])
    plan = FoldPlan(folds, fold_mode)
    accuracies, stats = {}, {}
    for name in dict.fromkeys(arch):
        builder = functools.partial(_builder, name, p["width_scale"], p["clstm_dropout"])
        result = cross_validate(builder, dataset, plan, cfg, workers=p["workers"])
        for fold in result.folds:
            fold_dir = out / name / f"fold{fold.fold + 1}"
            emit_report(fold.report, fold_dir)
            fold.history.write(fold_dir / "history.tsv")
        accuracies[name] = result.accuracies
        stats[name] = {"mean_accuracy": round(result.mean_accuracy, 4), "std_accuracy": round(result.std_accuracy, 4)}
        click.echo(f"{name}: mean accuracy {100 * result.mean_accuracy:.2f}% (std {100 * result.std_accuracy:.2f})")
    emit_cv_summary(accuracies, out)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_config(out, "xval", {"arch": list(arch), "folds": folds, "fold_mode": fold_mode, **p})
    click.echo((out / "summary.txt").read_text(encoding="utf-8"), nl=False)


def _builder(arch, width_scale, clstm_dropout, num_classes):
    return build_architecture(arch, num_classes, width_scale, clstm_dropout)


def _load(checkpoint) -> tuple[Model, dict, Normalizer]:
    model, meta = load_checkpoint(checkpoint)
    normalizer = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else Normalizer.identity(model.spec.input_dim)
    return model, meta, normalizer


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@config_option
@runtime_errors
def evaluate(checkpoint, data, out, workers, config):
    """Evaluate a checkpoint on a dataset and write the report files."""
    model, meta, normalizer = _load(checkpoint)
    dataset = load_dataset(data, workers)
    if meta.get("class_names") and meta["class_names"] != dataset.class_names:
        raise SeqEmoError(f"dataset classes {dataset.class_names} differ from the checkpoint's {meta['class_names']}")
    probs = predict_proba(model, normalizer.apply(dataset.features), pad_to=meta.get("pad_frames"), mask=meta.get("mask_attention", False))
    report = EvalReport.from_predictions(dataset.class_names, dataset.labels, np.argmax(probs, axis=1))
    out = Path(out)
    emit_report(report, out)
    _write_config(out, "eval", click.get_current_context().params)
    click.echo(f"accuracy {report.accuracy:.4f} on {report.total} items; reports in {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--wav", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--resample/--no-resample", default=False, help="Linearly resample non-16 kHz audio (lossy).")
@runtime_errors
def predict(checkpoint, wav, resample):
    """Print per-class probabilities for one WAV file."""
    model, meta, normalizer = _load(checkpoint)
    features = mfcc_extract(read_wav(wav, allow_resample=resample)).coefficients.T.astype(np.float32)
    probs = predict_proba(model, normalizer.apply([features]), pad_to=meta.get("pad_frames"), mask=meta.get("mask_attention", False))[0]
    names = meta.get("class_names") or [f"class{i}" for i in range(len(probs))]
    for name, prob in zip(names, probs):
        click.echo(f"{name}\t{prob:.6f}")


if __name__ == "__main__":
    main()
