"""Metric computation and benchmark orchestration.

Word error rate uses Levenshtein alignment over normalized word sequences
(see text.normalize_text for the exact normalization). Speaker similarity is
plain cosine over embedder outputs. Perceptual scorers (DNSMOS-style,
embedding-similarity-style) are external plug-ins spoken to over a
line-delimited JSON stdio protocol; absent or failing scorers leave null
columns and the run continues. Results land as a CSV plus summary figures.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import select
import subprocess
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .audio import LogMelSpectrogram, Waveform, compute_log_mel, write_wav
from .errors import InvalidInputError, UndefinedSimilarityError
from .mixing import MixtureExample, derive_seed
from .model import ModelBundle
from .text import normalize_text

logger = logging.getLogger(__name__)

CSV_BASE_COLUMNS = (
    "example_id", "wer", "cos_sim", "dnsmos_sig", "dnsmos_bak", "dnsmos_ovl", "sbs",
)


def wer(hyp: list[str], ref: list[str]) -> float:
    """(substitutions + deletions + insertions) / len(ref).

    An empty reference scores 0.0 against an empty hypothesis and infinity
    otherwise.
    """
    if not ref:
        return math.inf if hyp else 0.0
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            if r == h:
                cur.append(prev[j - 1])
            else:
                cur.append(1 + min(prev[j - 1], prev[j], cur[-1]))
        prev = cur
    return prev[-1] / len(ref)


def wer_text(hyp_text: str, ref_text: str) -> float:
    return wer(normalize_text(hyp_text).split(), normalize_text(ref_text).split())


def cosine_similarity(emb_a, emb_b) -> float:
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity undefined for zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


class ScorerPlugin:
    """External scorer process speaking newline-delimited JSON on stdio.

    Request:  {"wav_path": ..., "ref_wav_path": ...}
    Response: {"score": <float>} or {"scores": {<name>: <float>, ...}}
    A response must arrive within timeout_s; a late, crashed, or malformed
    scorer yields None for that row and is not consulted again.
    """

    def __init__(self, name: str, command: list[str], timeout_s: float = 60.0):
        self.name = name
        self.command = list(command)
        self.timeout_s = timeout_s
        self._proc: subprocess.Popen | None = None
        self._dead = False

    def _ensure_started(self):
        if self._proc is None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )

    def score(self, wav_path, ref_wav_path=None) -> dict | None:
        if self._dead:
            return None
        try:
            self._ensure_started()
            request = {"wav_path": str(wav_path)}
            if ref_wav_path is not None:
                request["ref_wav_path"] = str(ref_wav_path)
            self._proc.stdin.write(json.dumps(request) + "\n")
            self._proc.stdin.flush()
            ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout_s)
            if not ready:
                raise TimeoutError(f"no response within {self.timeout_s}s")
            line = self._proc.stdout.readline()
            if not line:
                raise RuntimeError("scorer closed its output")
            reply = json.loads(line)
            if "scores" in reply:
                return {k: float(v) for k, v in reply["scores"].items()}
            return {"score": float(reply["score"])}
        except Exception as exc:
            logger.warning("scorer %s failed (%s); remaining rows will be null", self.name, exc)
            self._dead = True
            self.close()
            return None

    def close(self):
        if self._proc is not None:
            try:
                self._proc.kill()
            except Exception:
                pass
            self._proc = None


@dataclass
class EvalResult:
    example_id: str
    wer: float | None = None
    cos_sim: float | None = None
    dnsmos_sig: float | None = None
    dnsmos_bak: float | None = None
    dnsmos_ovl: float | None = None
    sbs: float | None = None
    extra: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def _mean_or_none(values):
    vals = [v for v in values if v is not None and not math.isinf(v)]
    return sum(vals) / len(vals) if vals else None


def write_results_csv(path, results: list[EvalResult], extra_columns: list[str]):
    columns = list(CSV_BASE_COLUMNS) + list(extra_columns)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in sorted(results, key=lambda r: r.example_id):
            row = [r.example_id] + [
                _fmt(getattr(r, c)) for c in CSV_BASE_COLUMNS[1:]
            ] + [_fmt(r.extra.get(c)) for c in extra_columns]
            writer.writerow(row)
        agg = aggregate_results(results, extra_columns)
        writer.writerow(["MEAN"] + [_fmt(agg[c]) for c in columns[1:]])


def aggregate_results(results: list[EvalResult], extra_columns: list[str] = ()) -> dict:
    agg = {}
    for c in CSV_BASE_COLUMNS[1:]:
        agg[c] = _mean_or_none([getattr(r, c) for r in results])
    for c in extra_columns:
        agg[c] = _mean_or_none([r.extra.get(c) for r in results])
    return agg


def format_table(results: list[EvalResult], aggregates: dict) -> str:
    """Plain-text metric table (WER reported as a fraction, not percent)."""
    lines = [f"{'example':<24}{'wer':>10}{'cos_sim':>10}"]
    for r in sorted(results, key=lambda r: r.example_id):
        lines.append(f"{r.example_id:<24}{_fmt(r.wer):>10}{_fmt(r.cos_sim):>10}")
    lines.append(f"{'MEAN':<24}{_fmt(aggregates['wer']):>10}{_fmt(aggregates['cos_sim']):>10}")
    return "\n".join(lines)


def run_benchmark(
    bundle: ModelBundle,
    examples: list[MixtureExample],
    out_dir,
    scorers: list[ScorerPlugin] = (),
    flow_steps: int | None = None,
    seed: int = 0,
    transcriber=None,
    transcriber_label: str = "self",
    predict_fn=None,
    write_figures: bool = True,
) -> tuple[list[EvalResult], dict]:
    """Extract every example, score it, and emit results.csv (+ figures).

    The transcriber for WER is pluggable; the default is this model's own
    unprompted ASR path and is labeled as such in the output metadata.
    predict_fn may replace the extraction path entirely (e.g. a
    mixture-as-prediction control).
    """
    out_dir = Path(out_dir)
    (out_dir / "predictions").mkdir(parents=True, exist_ok=True)
    (out_dir / "references").mkdir(parents=True, exist_ok=True)
    transcriber = transcriber or bundle.transcribe
    results = []
    for ex in examples:
        if predict_fn is not None:
            prediction = predict_fn(ex)
        else:
            rng = torch.Generator().manual_seed(
                derive_seed(seed, 1, zlib.crc32(ex.example_id.encode()))
            )
            prediction, _ = bundle.extract(
                ex.mixture, ex.enrollment, n_steps=flow_steps, rng=rng
            )
        pred_path = out_dir / "predictions" / f"{ex.example_id}.wav"
        ref_path = out_dir / "references" / f"{ex.example_id}.wav"
        write_wav(pred_path, prediction)
        write_wav(ref_path, ex.target)

        result = EvalResult(example_id=ex.example_id)
        result.wer = wer_text(transcriber(prediction), ex.text)
        result.cos_sim = cosine_similarity(
            bundle.embedder.embed(prediction), bundle.embedder.embed(ex.target)
        )
        for scorer in scorers:
            reply = scorer.score(pred_path, ref_path)
            if reply is None:
                continue
            if scorer.name == "dnsmos":
                result.dnsmos_sig = reply.get("sig")
                result.dnsmos_bak = reply.get("bak")
                result.dnsmos_ovl = reply.get("ovl")
            elif scorer.name == "sbs":
                result.sbs = reply.get("score")
            else:
                result.extra[scorer.name] = reply.get("score")
        results.append(result)
    for scorer in scorers:
        scorer.close()

    extra_columns = sorted({k for r in results for k in r.extra})
    aggregates = aggregate_results(results, extra_columns)
    write_results_csv(out_dir / "results.csv", results, extra_columns)
    meta = {
        "transcriber": transcriber_label,
        "flow_steps": flow_steps or bundle.flow.cfg.sample_steps,
        "seed": seed,
        "n_examples": len(results),
        "wer_units": "fraction",
    }
    (out_dir / "eval_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if write_figures and results:
        _metrics_figure(results, out_dir / "metrics.png")
    return results, aggregates


def _metrics_figure(results: list[EvalResult], path):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    wers = [r.wer for r in results if r.wer is not None and not math.isinf(r.wer)]
    sims = [r.cos_sim for r in results if r.cos_sim is not None]
    axes[0].hist(wers, bins=20, color="tab:blue")
    axes[0].set_xlabel("WER (fraction)")
    axes[0].set_ylabel("count")
    axes[1].hist(sims, bins=20, color="tab:orange")
    axes[1].set_xlabel("speaker cosine similarity")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_spectrograms(
    examples: list[MixtureExample],
    outputs: list[LogMelSpectrogram],
    out_dir,
) -> list[Path]:
    """One PNG per example: mixture / prediction / reference log-mels."""
    if len(examples) != len(outputs):
        raise InvalidInputError("examples and outputs must align one-to-one")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ex, pred_mel in zip(examples, outputs):
        panels = [
            ("mixture", _mel_panel(ex.mixture, pred_mel)),
            ("prediction", pred_mel.values),
            ("reference", _mel_panel(ex.target, pred_mel)),
        ]
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2), sharey=True)
        for ax, (title, values) in zip(axes, panels):
            ax.imshow(values, origin="lower", aspect="auto", cmap="magma")
            ax.set_title(title)
            ax.set_xlabel("frame")
        axes[0].set_ylabel("mel band")
        fig.tight_layout()
        path = out_dir / f"{ex.example_id}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def _mel_panel(w: Waveform, like: LogMelSpectrogram) -> np.ndarray:
    from .audio import FeatureConfig

    cfg = FeatureConfig(
        sample_rate=w.sample_rate,
        n_mels=like.n_mels,
        win_ms=1000.0 * like.frame_len / w.sample_rate,
        hop_ms=1000.0 * like.frame_hop / w.sample_rate,
    )
    return compute_log_mel(w, cfg).values
