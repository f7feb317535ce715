"""Command-line entry point.

One binary, subcommand style. Option precedence is CLI > environment >
config file > built-in defaults. Every artifact-producing run writes a
run_meta.json carrying the resolved config fingerprint and a git-describe
string. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import json
import shlex
import shutil
import subprocess
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import torch

from .config import RunConfig
from .errors import ConfigError, DataError, FlowTSEError
from .evaluation import ScorerPlugin, format_table, plot_spectrograms, run_benchmark
from .mixing import (
    build_eval_set,
    derive_seed,
    load_manifest,
    make_eval_pairings,
    write_pairing_file,
)
from .synthdata import generate_toy_corpus
from .training import (
    Trainer,
    held_out_losses,
    export_base_weights,
    load_base_weights,
    load_model_for_inference,
)

import numpy as np


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def write_run_meta(out_dir, cfg: RunConfig, seed: int, command: str):
    meta = {
        "command": command,
        "config_fingerprint": cfg.fingerprint(),
        "git_describe": _git_describe(),
        "seed": seed,
    }
    Path(out_dir, "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


@contextmanager
def _output_dir(path):
    """Create the output directory; remove it again if the command fails."""
    path = Path(path)
    created = not path.exists()
    path.mkdir(parents=True, exist_ok=True)
    try:
        yield path
    except BaseException:
        if created:
            shutil.rmtree(path, ignore_errors=True)
        raise


@contextmanager
def _output_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        yield path
    except BaseException:
        path.unlink(missing_ok=True)
        raise


def _load_run(run_dir, init=None):
    """Rebuild a model bundle from a training run directory."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise DataError(f"{run_dir} is not a run directory (no config.json)")
    cfg = RunConfig.from_dict(json.loads(config_path.read_text()))
    bundle = cfg.build()
    load_model_for_inference(bundle, run_dir / "checkpoint", init_dir=init)
    return cfg, bundle


@click.group()
def cli():
    """Generative target speech extraction toolkit."""


@cli.command("make-toy-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--speakers", default=6, show_default=True)
@click.option("--utts-per-speaker", default=36, show_default=True)
@click.option("--holdout-per-speaker", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def make_toy_corpus_cmd(out_dir, speakers, utts_per_speaker, holdout_per_speaker, seed):
    """Generate the bundled synthetic corpus (WAVs + manifests)."""
    with _output_dir(out_dir) as out:
        paths = generate_toy_corpus(
            out, n_speakers=speakers, utts_per_speaker=utts_per_speaker,
            holdout_per_speaker=holdout_per_speaker, seed=seed,
        )
    for name, p in paths.items():
        click.echo(f"{name}: {p}")


@cli.command("make-eval-set")
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--n-mixtures", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
def make_eval_set_cmd(manifest, out_path, n_mixtures, seed):
    """Freeze evaluation pairings (each mixture is later extracted twice)."""
    corpus = load_manifest(manifest)
    pairings = make_eval_pairings(corpus, n_mixtures, np.random.default_rng(seed))
    with _output_file(out_path) as out:
        write_pairing_file(out, pairings)
    click.echo(f"wrote {len(pairings)} pairings ({2 * len(pairings)} eval examples) to {out_path}")


def _apply_train_overrides(cfg: RunConfig, seed, epochs, lora_rank, no_spk_emb,
                           no_enroll, no_joint, train_decoder, crop_seconds,
                           global_batch, lr):
    t = cfg.trainer
    if seed is not None:
        t.seed = seed
    if epochs is not None:
        t.epochs = epochs
        if t.lr_decay_epoch > epochs:
            t.lr_decay_epoch = max(1, epochs // 2)
    if lora_rank is not None:
        if lora_rank == "full":
            t.full_finetune = True
        else:
            try:
                cfg.encoder.lora_rank = int(lora_rank)
            except ValueError:
                raise ConfigError(f"--lora-rank must be an integer or 'full', got {lora_rank!r}")
    if no_spk_emb:
        t.ablations.no_spk_emb = True
    if no_enroll:
        t.ablations.no_enroll = True
    if no_joint:
        t.ablations.no_joint = True
    if train_decoder is not None:
        t.train_decoder = train_decoder
    if crop_seconds is not None:
        t.crop_seconds = crop_seconds
    if global_batch is not None:
        t.global_batch = global_batch
    if lr is not None:
        t.lr = lr


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--stage", type=click.Choice(["base", "tse"]), default="tse", show_default=True)
@click.option("--init", "init_dir", type=click.Path(), default=None,
              help="Pretrained weight directory (base stage output).")
@click.option("--resume", "resume_dir", type=click.Path(), default=None,
              help="Run directory to continue training from.")
@click.option("--holdout-manifest", type=click.Path(), default=None,
              help="Evaluate held-out losses at each epoch end.")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lora-rank", type=str, default=None, help="Integer rank or 'full'.")
@click.option("--no-spk-emb", is_flag=True, help="Ablation: drop the speaker-embedding prompt.")
@click.option("--no-enroll", is_flag=True, help="Ablation: drop the enrollment prompt.")
@click.option("--no-joint", is_flag=True, help="Ablation: drop the transcription loss.")
@click.option("--train-decoder/--no-train-decoder", default=None)
@click.option("--crop-seconds", type=float, default=None)
@click.option("--global-batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
def train_cmd(config_path, manifest, out_dir, stage, init_dir, resume_dir,
              holdout_manifest, seed, epochs, lora_rank, no_spk_emb, no_enroll,
              no_joint, train_decoder, crop_seconds, global_batch, lr):
    """Train the base (pretraining) or tse (joint extraction) stage."""
    if resume_dir and init_dir:
        raise ConfigError("--resume and --init conflict; the checkpoint pins its own init")
    cfg = RunConfig.load(config_path)
    _apply_train_overrides(cfg, seed, epochs, lora_rank, no_spk_emb, no_enroll,
                           no_joint, train_decoder, crop_seconds, global_batch, lr)
    corpus = load_manifest(manifest)

    with _output_dir(out_dir) as out:
        if resume_dir:
            resume_dir = Path(resume_dir)
            prev = json.loads((resume_dir / "config.json").read_text())
            if RunConfig.from_dict(prev).fingerprint() != cfg.fingerprint():
                raise ConfigError(
                    "resume config does not match the original run (conflicting flags?)"
                )
            prev_meta = json.loads((resume_dir / "checkpoint" / "meta.json").read_text())
            init_dir = prev_meta.get("external_init")

        bundle = cfg.build(init_seed=cfg.trainer.seed)
        if stage == "tse" and init_dir:
            load_base_weights(bundle, init_dir)
        trainer = Trainer(
            bundle, corpus, cfg.trainer, stage=stage,
            external_init=str(init_dir) if (stage == "tse" and init_dir) else None,
            log_path=out / "train_log.jsonl",
        )
        if resume_dir:
            trainer.load_checkpoint(Path(resume_dir) / "checkpoint")

        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        write_run_meta(out, cfg, cfg.trainer.seed, f"train --stage {stage}")

        epoch_end_fn = None
        if holdout_manifest:
            held_corpus = load_manifest(holdout_manifest)
            from .mixing import iter_epoch

            held_examples = list(
                iter_epoch(held_corpus, base_seed=9_999, epoch=0, tokenizer=bundle.tokenizer)
            )
            epoch_end_fn = lambda b: held_out_losses(
                b, held_examples, ablations=cfg.trainer.ablations,
                crop_seconds=cfg.trainer.crop_seconds,
            )

        history = trainer.fit(epoch_end_fn)
        trainer.save_checkpoint(out / "checkpoint")
        if stage == "base":
            export_base_weights(bundle, out / "base_weights")
        for entry in history:
            click.echo(json.dumps(entry, sort_keys=True))
    click.echo(f"run directory: {out_dir}")


@cli.command("extract")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--mixture", "mixture_path", required=True, type=click.Path())
@click.option("--enroll", "enroll_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--init", "init_dir", type=click.Path(), default=None)
@click.option("--flow-steps", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def extract_cmd(run_dir, mixture_path, enroll_path, out_path, init_dir, flow_steps, seed):
    """Extract the target speaker from a mixture WAV given an enrollment WAV."""
    from .audio import read_wav, write_wav

    cfg, bundle = _load_run(run_dir, init=init_dir)
    mixture = read_wav(mixture_path)
    enroll = read_wav(enroll_path)
    rng = torch.Generator().manual_seed(derive_seed(seed, 1, 0))
    with _output_file(out_path) as out:
        prediction, _ = bundle.extract(mixture, enroll, n_steps=flow_steps, rng=rng)
        write_wav(out, prediction)
        write_run_meta(out.parent, cfg, seed, "extract")
    click.echo(f"wrote {out_path} ({prediction.duration_s:.2f} s)")


def _parse_scorers(specs) -> list[ScorerPlugin]:
    scorers = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--scorer must look like name=command, got {spec!r}")
        name, command = spec.split("=", 1)
        scorers.append(ScorerPlugin(name.strip(), shlex.split(command)))
    return scorers


@cli.command("evaluate")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--pairings", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--init", "init_dir", type=click.Path(), default=None)
@click.option("--flow-steps", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scorer", "scorer_specs", multiple=True,
              help="External scorer plug-in, e.g. dnsmos='python3 my_dnsmos.py'.")
def evaluate_cmd(run_dir, manifest, pairings, out_dir, init_dir, flow_steps, seed, scorer_specs):
    """Run the benchmark over a frozen eval set; writes results.csv + figures."""
    cfg, bundle = _load_run(run_dir, init=init_dir)
    corpus = load_manifest(manifest)
    examples = build_eval_set(corpus, pairings, tokenizer=bundle.tokenizer)
    scorers = _parse_scorers(scorer_specs)
    with _output_dir(out_dir) as out:
        results, aggregates = run_benchmark(
            bundle, examples, out, scorers=scorers, flow_steps=flow_steps, seed=seed,
        )
        write_run_meta(out, cfg, seed, "evaluate")
    click.echo(format_table(results, aggregates))


@cli.command("plot")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--pairings", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--init", "init_dir", type=click.Path(), default=None)
@click.option("-n", "n_examples", type=int, default=3, show_default=True)
@click.option("--flow-steps", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def plot_cmd(run_dir, manifest, pairings, out_dir, init_dir, n_examples, flow_steps, seed):
    """Render mixture / prediction / reference spectrogram figures."""
    cfg, bundle = _load_run(run_dir, init=init_dir)
    corpus = load_manifest(manifest)
    examples = build_eval_set(corpus, pairings, tokenizer=bundle.tokenizer)[:n_examples]
    with _output_dir(out_dir) as out:
        outputs = []
        for ex in examples:
            rng = torch.Generator().manual_seed(derive_seed(seed, 1, len(outputs)))
            _, mel = bundle.extract(ex.mixture, ex.enrollment, n_steps=flow_steps, rng=rng)
            outputs.append(mel)
        paths = plot_spectrograms(examples, outputs, out)
        write_run_meta(out, cfg, seed, "plot")
    for p in paths:
        click.echo(str(p))


@cli.command("inspect-config")
@click.option("--config", "config_path", type=click.Path(), default=None)
def inspect_config_cmd(config_path):
    """Print the resolved configuration (stdout) and its fingerprint (stderr)."""
    cfg = RunConfig.load(config_path)
    click.echo(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    click.echo(f"fingerprint: {cfg.fingerprint()}", err=True)


def main():
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except click.Abort:
        sys.exit(1)
    except FlowTSEError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    main()
