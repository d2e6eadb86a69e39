"""Command-line front door.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric divergence during training.
"""

import functools
import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from src.config import AGNSettings, RunConfig, TaskConfig, TrainingMode, load_config
from src.corpus import CorpusIndexer, load_corpus
from src.errors import AGNError, InvalidConfigError, TrainingDivergenceError
from src.metrics import evaluate
from src.network import AGNModel
from src.persistence import Checkpoint, diff_checkpoints, load_checkpoint, read_wav, save_checkpoint, write_wav
from src.report_writer import save_report
from src.synth_corpus import generate_corpus
from src.task_synth import assign_splits
from src.training import finetune as run_finetune
from src.training import pretrain as run_pretrain
from src.types import CorpusRole
from src.workflow import separate_speakers

logger = logging.getLogger(__name__)
console = Console()

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

app = typer.Typer(
    name="agn",
    help="Speaker-set extraction with an attentionally gated BLSTM mask estimator.",
    no_args_is_help=True,
    add_completion=False,
)


class Split(str, Enum):
    TRAIN = "train"
    EVAL = "eval"
    ALL = "all"


class FinetuneMode(str, Enum):
    CONVENTIONAL = "conventional"
    ROBUST = "robust"


class Conversation(str, Enum):
    AUTO = "auto"
    ON = "on"
    OFF = "off"


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=False, show_path=False)],
        force=True,
    )


def _exit_code(error: AGNError) -> int:
    if isinstance(error, TrainingDivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(error, InvalidConfigError):
        return EXIT_USAGE
    return EXIT_DATA


def handle_errors(command):
    """Map pipeline errors to exit codes with a one-line message."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except TrainingDivergenceError as e:
            logger.error(f"Training diverged: {e}")
            if e.last_checkpoint:
                logger.error(f"Last good checkpoint: {e.last_checkpoint}")
            raise typer.Exit(EXIT_DIVERGENCE)
        except AGNError as e:
            logger.error(str(e))
            raise typer.Exit(_exit_code(e))

    return wrapper


def _settings(ctx: typer.Context) -> AGNSettings:
    return ctx.obj if isinstance(ctx.obj, AGNSettings) else AGNSettings()


@app.callback()
def main(
    ctx: typer.Context,
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Logging level (default from AGN_LOG_LEVEL)"),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Example producer threads (default from AGN_NUM_WORKERS)"),
):
    settings = AGNSettings()
    updates = {}
    if log_level:
        updates["log_level"] = log_level
    if workers:
        updates["num_workers"] = workers
    settings = settings.model_copy(update=updates)
    setup_logging(settings.log_level)
    ctx.obj = settings


def _load_run_config(path: Optional[Path]) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _parse_range(values: Tuple[int, int], flag: str) -> Tuple[int, int]:
    low, high = values
    if low < 0 or high < low:
        raise typer.BadParameter(f"expected 0 <= low <= high, got {low} {high}", param_hint=flag)
    return low, high


# --------------------------------------------------------------------------- #
# Corpus commands
# --------------------------------------------------------------------------- #
@app.command("synth-corpus")
@handle_errors
def synth_corpus(
    out: Path = typer.Option(..., "--out", help="Output corpus directory"),
    speakers: int = typer.Option(..., "--speakers", min=1, help="Number of synthetic speakers"),
    seconds: float = typer.Option(..., "--seconds", min=0.0, help="Audio per speaker, seconds"),
    seed: int = typer.Option(0, "--seed", min=0, help="Generator seed"),
    utterance_seconds: float = typer.Option(10.0, "--utterance-seconds", min=0.1, help="Utterance length"),
    prefix: str = typer.Option("spk", "--prefix", help="Speaker id prefix"),
    force: bool = typer.Option(False, "--force", help="Write into a non-empty directory"),
):
    """Generate a deterministic synthetic speaker corpus with a manifest."""
    manifest = generate_corpus(out, speakers, seconds, seed, utterance_seconds, prefix, force)
    console.print(f"Manifest: {manifest}")


@app.command("make-manifest")
@handle_errors
def make_manifest(
    root: Path = typer.Option(..., "--root", help="Corpus root with one directory per speaker"),
    out: Optional[Path] = typer.Option(None, "--out", help="Manifest path (default ROOT/manifest.tsv)"),
):
    """Index a ``root/<speaker>/*.wav`` tree into a manifest."""
    manifest = CorpusIndexer(root).write(out)
    console.print(f"Manifest: {manifest}")


# --------------------------------------------------------------------------- #
# Training commands
# --------------------------------------------------------------------------- #
def _log_path(out: Path, log: Optional[Path]) -> Path:
    return log if log else out.with_name(out.name + ".log")


@app.command()
@handle_errors
def pretrain(
    ctx: typer.Context,
    corpus: Path = typer.Option(..., "--corpus", help="Well-known speaker manifest"),
    out: Path = typer.Option(..., "--out", help="Output checkpoint"),
    config: Optional[Path] = typer.Option(None, "--config", help="Key-value config file"),
    init: Optional[Path] = typer.Option(None, "--init", help="Checkpoint to resume from"),
    log: Optional[Path] = typer.Option(None, "--log", help="Training log (default OUT.log)"),
    progress: bool = typer.Option(True, "--progress/--no-progress", help="Show a progress bar"),
):
    """Jointly train the network and the well-known speaker embeddings."""
    run_config = _load_run_config(config)
    run_config = run_config.model_copy(
        update={"train": run_config.train.model_copy(update={"mode": TrainingMode.PRETRAIN})}
    )
    settings = _settings(ctx)
    well_known = load_corpus(corpus, CorpusRole.WELL_KNOWN)
    splits = assign_splits(well_known, run_config.data.head_seconds)

    optimizer, start_step = None, 0
    if init:
        ckpt = load_checkpoint(init, run_config.model)
        if ckpt.stft != run_config.stft:
            raise InvalidConfigError(f"{init}: STFT framing {ckpt.stft} differs from configuration {run_config.stft}")
        if ckpt.mode not in (None, TrainingMode.PRETRAIN):
            raise InvalidConfigError(f"{init} was produced by {ckpt.mode.value}; cannot resume pre-training from it")
        model, optimizer, start_step = ckpt.model, ckpt.optimizer, ckpt.step
        logger.info(f"Resuming pre-training from {init} at step {start_step}")
    else:
        model = AGNModel.initialize(run_config.model, well_known.speaker_names)

    result = run_pretrain(
        splits["train"],
        model,
        run_config,
        eval_corpus=splits["eval"],
        optimizer=optimizer,
        start_step=start_step,
        log_path=_log_path(out, log),
        checkpoint_path=out,
        num_workers=settings.num_workers,
        progress=progress,
    )
    save_checkpoint(
        Checkpoint(result.model, run_config.stft, result.optimizer, result.step, run_config.train.seed, TrainingMode.PRETRAIN),
        out,
    )
    console.print(f"Checkpoint: {out} (step {result.step})")


@app.command()
@handle_errors
def finetune(
    ctx: typer.Context,
    corpus: Path = typer.Option(..., "--corpus", help="New speaker manifest"),
    out: Path = typer.Option(..., "--out", help="Output checkpoint"),
    init: Path = typer.Option(..., "--init", help="Pre-trained checkpoint"),
    mode: FinetuneMode = typer.Option(..., "--mode", help="conventional updates the network too; robust only new embeddings"),
    config: Optional[Path] = typer.Option(None, "--config", help="Key-value config file"),
    log: Optional[Path] = typer.Option(None, "--log", help="Training log (default OUT.log)"),
    progress: bool = typer.Option(True, "--progress/--no-progress", help="Show a progress bar"),
):
    """Adapt a pre-trained checkpoint to new speakers."""
    run_config = _load_run_config(config)
    training_mode = TrainingMode(f"finetune_{mode.value}")
    run_config = run_config.model_copy(
        update={"train": run_config.train.model_copy(update={"mode": training_mode})}
    )
    settings = _settings(ctx)
    ckpt = load_checkpoint(init, run_config.model)
    if ckpt.stft != run_config.stft:
        raise InvalidConfigError(f"{init}: STFT framing {ckpt.stft} differs from configuration {run_config.stft}")
    new = load_corpus(corpus, CorpusRole.NEW)
    splits = assign_splits(new, run_config.data.head_seconds)

    result = run_finetune(
        splits["train"],
        ckpt.model,
        run_config,
        eval_corpus=splits["eval"],
        log_path=_log_path(out, log),
        checkpoint_path=out,
        num_workers=settings.num_workers,
        progress=progress,
    )
    save_checkpoint(
        Checkpoint(result.model, run_config.stft, result.optimizer, result.step, run_config.train.seed, training_mode),
        out,
    )
    console.print(f"Checkpoint: {out} (step {result.step})")


# --------------------------------------------------------------------------- #
# Inference commands
# --------------------------------------------------------------------------- #
@app.command("eval")
@handle_errors
def eval_command(
    ctx: typer.Context,
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint to evaluate"),
    corpus: Path = typer.Option(..., "--corpus", help="Speaker manifest"),
    out: Path = typer.Option(..., "--out", help="Directory for report.txt and per_example.csv"),
    split: Split = typer.Option(Split.EVAL, "--split", help="Which split of the corpus to draw from"),
    role: CorpusRole = typer.Option(CorpusRole.WELL_KNOWN, "--role", help="Role deciding which split is train/eval"),
    g_range: Tuple[int, int] = typer.Option((1, 1), "--g-range", help="Target count range G"),
    h_range: Tuple[int, int] = typer.Option((1, 1), "--h-range", help="Interferer count range H"),
    n: int = typer.Option(100, "--n", min=0, help="Number of examples"),
    seed: int = typer.Option(0, "--seed", min=0, help="Evaluation stream seed"),
    conversation: Conversation = typer.Option(Conversation.AUTO, "--conversation", help="Single-active-speaker sources; auto enables them for G or H > 1"),
    oracle: bool = typer.Option(False, "--oracle", help="Use the true target magnitude instead of the network"),
    config: Optional[Path] = typer.Option(None, "--config", help="Key-value config file for tau, SNR and split settings"),
):
    """Score a checkpoint on deterministic speaker-set tasks."""
    g_min, g_max = _parse_range(g_range, "--g-range")
    h_min, h_max = _parse_range(h_range, "--h-range")
    run_config = _load_run_config(config)
    if conversation == Conversation.AUTO:
        conversation_mode = g_max > 1 or h_max > 1
    else:
        conversation_mode = conversation == Conversation.ON
    try:
        task = TaskConfig(
            **{
                **run_config.task.model_dump(),
                "g_min": g_min,
                "g_max": g_max,
                "h_min": h_min,
                "h_max": h_max,
                "conversation_mode": conversation_mode,
            }
        )
    except ValueError as e:
        raise typer.BadParameter(str(e)) from e

    checkpoint = load_checkpoint(ckpt)
    loaded = load_corpus(corpus, role)
    eval_corpus = loaded if split == Split.ALL else assign_splits(loaded, run_config.data.head_seconds)[split.value]
    report = evaluate(
        checkpoint.model,
        eval_corpus,
        task,
        n,
        seed,
        checkpoint.stft,
        oracle=oracle,
        num_workers=_settings(ctx).num_workers,
        checkpoint_id=f"{ckpt.name}@{checkpoint.step}",
    )
    paths = save_report(report, out)
    if report.mean is None:
        console.print(f"Mean SI-SNR: undefined (0 examples); report in {paths['report']}")
    else:
        console.print(
            f"Mean SI-SNR: {report.mean:.2f} dB (mixture {report.mean_mixture:.2f} dB, "
            f"improvement {report.mean_improvement:.2f} dB)"
        )


@app.command()
@handle_errors
def separate(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint"),
    mix: Path = typer.Option(..., "--mix", help="Mixture WAV (8 or 16 kHz mono PCM16)"),
    speakers: str = typer.Option(..., "--speakers", help="Comma-separated speaker ids to extract"),
    out: Path = typer.Option(..., "--out", help="Output WAV"),
):
    """Extract the sum of the named speakers from a mixture."""
    ids: List[str] = [s.strip() for s in speakers.split(",") if s.strip()]
    if not ids:
        raise typer.BadParameter("name at least one speaker", param_hint="--speakers")
    if len(set(ids)) != len(ids):
        raise typer.BadParameter(f"duplicate speaker ids in {ids}", param_hint="--speakers")
    checkpoint = load_checkpoint(ckpt)
    mixture = read_wav(mix)
    estimate = separate_speakers(checkpoint.model, mixture, ids, checkpoint.stft)
    write_wav(estimate, out)
    console.print(f"Extracted {', '.join(ids)} into {out}")


@app.command("inspect-ckpt")
@handle_errors
def inspect_ckpt(
    ckpt: Path = typer.Argument(..., help="Checkpoint to describe"),
    diff: Optional[Path] = typer.Option(None, "--diff", help="Compare against this checkpoint"),
):
    """Print a checkpoint's header, or what changed relative to another checkpoint."""
    checkpoint = load_checkpoint(ckpt)
    if diff is not None:
        other = load_checkpoint(diff)
        result = diff_checkpoints(other, checkpoint)
        table = Table(title=f"{diff.name} -> {ckpt.name}")
        table.add_column("Kind")
        table.add_column("Entries")
        table.add_row("changed parameters", ", ".join(result.changed_params) or "-")
        table.add_row("changed embedding rows", ", ".join(result.changed_rows) or "-")
        table.add_row("added embedding rows", ", ".join(result.added_rows) or "-")
        table.add_row("removed embedding rows", ", ".join(result.removed_rows) or "-")
        console.print(table)
        if result.identical:
            console.print("Checkpoints hold identical weights and embeddings")
        return

    model = checkpoint.model
    table = Table(title=str(ckpt))
    table.add_column("Field")
    table.add_column("Value")
    for field, value in [
        ("mode", checkpoint.mode.value if checkpoint.mode else "init"),
        ("step", checkpoint.step),
        ("seed", checkpoint.seed),
        ("stft", f"{checkpoint.stft.window_len_samples}/{checkpoint.stft.hop_samples} {checkpoint.stft.window}"),
        ("F", model.config.num_freq_bins),
        ("K", model.config.embedding_dim),
        ("BLSTM layers", model.config.num_blstm_layers),
        ("FC layers", model.config.num_fc_layers),
        ("hidden units", model.config.hidden_units),
        ("compression p", model.config.compression_exponent),
        ("network parameters", f"{model.params.num_parameters():,}"),
        ("speakers", model.embeddings.num_speakers),
        ("trainable rows", int(model.embeddings.trainable.sum())),
        ("optimizer", f"step {checkpoint.optimizer.step}" if checkpoint.optimizer else "none"),
    ]:
        table.add_row(field, str(value))
    console.print(table)
    console.print("Speakers: " + ", ".join(model.embeddings.speaker_ids))


def run() -> None:
    app()
