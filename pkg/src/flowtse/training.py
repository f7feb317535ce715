"""Joint optimization of the extraction model.

Two stages share one loop. The "base" stage pre-trains the unprompted encoder
and the text decoder on clean single-speaker utterances (transcription loss
only) — the stand-in for a web-scale pre-trained checkpoint. The "tse" stage
trains on dynamic mixtures with the combined flow-matching + transcription
loss; only the flow network, the LoRA updates, the enrollment positional
table, and the speaker projection receive gradients (plus the decoder when
explicitly requested).

Checkpoints restore training exactly: parameters, optimizer moments, data
position, and generator states all round-trip bitwise.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arrays import archive_fingerprint, load_archive, save_archive
from .audio import Waveform
from .decoder import batch_ce_loss
from .encoder import PromptSwitches, load_pretrained
from .errors import CheckpointError, ConfigError, NumericError
from .flow import FlowConditioning, cfm_loss, upsample_tokens
from .mixing import Corpus, MixtureExample, epoch_example, epoch_target_records, fix_length
from .model import ModelBundle, mel_tensor
from .text import TranscriptTokens

CHECKPOINT_VERSION = 1


@dataclass
class AblationSwitches:
    no_spk_emb: bool = False
    no_enroll: bool = False
    no_joint: bool = False

    def prompt_switches(self) -> PromptSwitches:
        return PromptSwitches(
            use_speaker=not self.no_spk_emb, use_enrollment=not self.no_enroll
        )


@dataclass
class TrainConfig:
    global_batch: int = 16
    micro_batch: int = 0  # 0 = whole batch in one chunk
    epochs: int = 10
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 5
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    grad_clip: float = 1.0  # 0 disables clipping
    ce_weight: float = 1.0
    crop_seconds: float | None = None
    train_decoder: bool = False
    full_finetune: bool = False  # "full" setting of the rank sweep
    n_mc: int = 1
    ablations: AblationSwitches = field(default_factory=AblationSwitches)

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_decay_epoch > self.epochs:
            raise ConfigError("lr_decay_epoch must be <= epochs")
        if self.global_batch < 1:
            raise ConfigError("global_batch must be >= 1")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: initial lr, then lr * decay_factor from decay_epoch on."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cfg.lr if epoch < cfg.lr_decay_epoch else cfg.lr * cfg.lr_decay_factor


@dataclass
class StepReport:
    step: int
    epoch: int
    lr: float
    loss_flow: float | None
    loss_ce: float | None
    loss: float
    skipped: bool = False


@dataclass
class _Item:
    mix_mel: torch.Tensor | None
    tgt_mel: torch.Tensor
    enroll_mel: torch.Tensor | None
    spk: torch.Tensor | None
    transcript: TranscriptTokens


class Trainer:
    def __init__(
        self,
        bundle: ModelBundle,
        corpus: Corpus,
        cfg: TrainConfig,
        stage: str = "tse",
        external_init: str | None = None,
        log_path=None,
    ):
        cfg.validate()
        if stage not in ("base", "tse"):
            raise ConfigError(f"unknown training stage {stage!r}")
        bundle.validate()
        self.bundle = bundle
        self.corpus = corpus
        self.cfg = cfg
        self.stage = stage
        self.external_init = external_init
        self.log_path = Path(log_path) if log_path else None

        self.torch_rng = torch.Generator().manual_seed(cfg.seed ^ 0x5EED)
        self._trainable = self._build_trainable()
        self._apply_freeze()
        self.optimizer = torch.optim.AdamW(
            list(self._trainable.values()),
            lr=lr_schedule(cfg, 0),
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.step = 0
        self.epoch = 0
        self.epoch_step = 0
        self.consecutive_skips = 0
        self.history: list[dict] = []
        self.step_reports: list[StepReport] = []

    # -- parameter policy --------------------------------------------------

    def _build_trainable(self) -> dict[str, torch.nn.Parameter]:
        b = self.bundle
        out: dict[str, torch.nn.Parameter] = {}
        if self.stage == "base":
            tse_side = set(b.encoder.trainable_parameters())
            for name, p in b.encoder.named_parameters():
                if name not in tse_side:
                    out[f"encoder.{name}"] = p
            for name, p in b.decoder.named_parameters():
                out[f"decoder.{name}"] = p
            return out
        if self.cfg.full_finetune:
            for name, p in b.encoder.named_parameters():
                out[f"encoder.{name}"] = p
        else:
            for name, p in b.encoder.trainable_parameters().items():
                out[f"encoder.{name}"] = p
        for name, p in b.flow.named_parameters():
            out[f"flow.{name}"] = p
        if self.cfg.train_decoder:
            for name, p in b.decoder.named_parameters():
                out[f"decoder.{name}"] = p
        return out

    def trainable_names(self) -> set[str]:
        return set(self._trainable)

    def _all_params(self) -> dict[str, torch.nn.Parameter]:
        out = {}
        for mod_name, module in (
            ("encoder", self.bundle.encoder),
            ("flow", self.bundle.flow),
            ("decoder", self.bundle.decoder),
        ):
            for name, p in module.named_parameters():
                out[f"{mod_name}.{name}"] = p
        return out

    def _apply_freeze(self):
        trainable = set(self._trainable)
        for name, p in self._all_params().items():
            p.requires_grad = name in trainable

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        trainable = set(self._trainable)
        return {
            n: p.detach().cpu().numpy()
            for n, p in self._all_params().items()
            if n not in trainable
        }

    # -- data --------------------------------------------------------------

    def _epoch_items(self) -> int:
        if self.stage == "base":
            return len(self.corpus.records)
        return len(epoch_target_records(self.corpus))

    def steps_per_epoch(self) -> int:
        return max(1, int(np.ceil(self._epoch_items() / self.cfg.global_batch)))

    def _crop(self, w: Waveform) -> Waveform:
        if self.cfg.crop_seconds:
            return fix_length(w, self.cfg.crop_seconds)
        return w

    def _prepare_tse(self, ex: MixtureExample) -> _Item:
        feats = self.bundle.features
        return _Item(
            mix_mel=mel_tensor(self._crop(ex.mixture), feats),
            tgt_mel=mel_tensor(self._crop(ex.target), feats),
            enroll_mel=mel_tensor(ex.enrollment, feats),
            spk=torch.from_numpy(
                np.asarray(self.bundle.embedder.embed(ex.enrollment), dtype=np.float32)
            ),
            transcript=TranscriptTokens(body=list(ex.transcript)),
        )

    def _batch_items(self, epoch: int, batch_index: int) -> list[_Item]:
        n = self._epoch_items()
        lo = batch_index * self.cfg.global_batch
        hi = min(lo + self.cfg.global_batch, n)
        items = []
        for i in range(lo, hi):
            if self.stage == "base":
                rec = self.corpus.records[i]
                w = self._crop(self.corpus.load_audio(rec.id))
                items.append(
                    _Item(
                        mix_mel=None,
                        tgt_mel=mel_tensor(w, self.bundle.features),
                        enroll_mel=None,
                        spk=None,
                        transcript=TranscriptTokens(
                            body=self.bundle.tokenizer.encode(rec.text)
                        ),
                    )
                )
            else:
                ex = epoch_example(
                    self.corpus, self.cfg.seed, epoch, i, tokenizer=self.bundle.tokenizer
                )
                items.append(self._prepare_tse(ex))
        return items

    # -- loss --------------------------------------------------------------

    def _chunks(self, items: list[_Item]) -> list[list[_Item]]:
        limit = self.cfg.micro_batch or len(items)
        chunks: list[list[_Item]] = []
        for item in items:
            cur = chunks[-1] if chunks else None
            if (
                cur is None
                or len(cur) >= limit
                or cur[0].tgt_mel.shape != item.tgt_mel.shape
            ):
                chunks.append([item])
            else:
                cur.append(item)
        return chunks

    def accumulate(self, items: list[_Item]) -> tuple[float | None, float | None, float]:
        """Backward over the batch in shape-uniform chunks; returns the batch
        losses (flow mean per element, ce mean per token, combined)."""
        joint_ce = self.stage == "base" or not self.cfg.ablations.no_joint
        use_flow = self.stage == "tse"
        total_elems = sum(it.tgt_mel.numel() for it in items) * self.cfg.n_mc
        total_tokens = sum(len(it.transcript.body) + 1 for it in items)
        switches = self.cfg.ablations.prompt_switches()

        flow_weighted = 0.0
        ce_sum = 0.0
        for chunk in self._chunks(items):
            tgt = torch.stack([it.tgt_mel for it in chunk])
            if self.stage == "base":
                speech = self.bundle.encoder.encode_base(tgt)
            else:
                mix = torch.stack([it.mix_mel for it in chunk])
                enroll = (
                    torch.stack([it.enroll_mel for it in chunk])
                    if switches.use_enrollment
                    else None
                )
                spk = torch.stack([it.spk for it in chunk])
                speech = self.bundle.encoder.encode_target(
                    mix, enroll, spk if switches.use_speaker else None, switches
                )
            loss = torch.zeros((), dtype=tgt.dtype)
            if use_flow:
                cond = FlowConditioning(
                    tokens=upsample_tokens(
                        speech.transpose(1, 2), tgt.shape[-1], self.bundle.flow.cfg.upsample_mode
                    ),
                    speaker=torch.stack([it.spk for it in chunk]),
                )
                flow_mean = cfm_loss(
                    self.bundle.flow, tgt, cond, self.torch_rng,
                    sigma=self.bundle.flow.cfg.sigma, n_mc=self.cfg.n_mc,
                )
                chunk_elems = tgt.numel() * self.cfg.n_mc
                loss = loss + flow_mean * (chunk_elems / total_elems)
                flow_weighted += float(flow_mean.detach()) * chunk_elems
            if joint_ce:
                ce = batch_ce_loss(
                    self.bundle.decoder, speech, [it.transcript for it in chunk],
                    reduction="sum",
                )
                loss = loss + self.cfg.ce_weight * ce / total_tokens
                ce_sum += float(ce.detach())
            if not torch.isfinite(loss):
                raise NumericError("non-finite training loss")
            loss.backward()

        flow_rep = flow_weighted / total_elems if use_flow else None
        ce_rep = ce_sum / total_tokens if joint_ce else None
        total = (flow_rep or 0.0) + self.cfg.ce_weight * (ce_rep if ce_rep is not None else 0.0)
        return flow_rep, ce_rep, total

    def train_step(self, items: list[_Item]) -> StepReport:
        lr = lr_schedule(self.cfg, self.epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        try:
            flow_rep, ce_rep, total = self.accumulate(items)
        except NumericError:
            self.optimizer.zero_grad(set_to_none=True)
            self.consecutive_skips += 1
            if self.consecutive_skips >= 3:
                raise NumericError("3 consecutive non-finite training steps") from None
            report = StepReport(self.step, self.epoch, lr, None, None, float("nan"), skipped=True)
            self.step_reports.append(report)
            return report
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self._trainable.values(), self.cfg.grad_clip)
        self.optimizer.step()
        self.consecutive_skips = 0
        report = StepReport(self.step, self.epoch, lr, flow_rep, ce_rep, total)
        self.step += 1
        self.step_reports.append(report)
        return report

    # -- epochs --------------------------------------------------------------

    def _log(self, payload: dict):
        if self.log_path:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(payload, sort_keys=True) + "\n")

    def fit(self, epoch_end_fn=None) -> list[dict]:
        """Train to cfg.epochs from the current position; returns per-epoch history."""
        while self.epoch < self.cfg.epochs:
            n_steps = self.steps_per_epoch()
            sums = {"flow": 0.0, "ce": 0.0, "loss": 0.0, "n": 0}
            t0 = time.monotonic()
            for b in range(self.epoch_step, n_steps):
                report = self.train_step(self._batch_items(self.epoch, b))
                self.epoch_step = b + 1
                if report.skipped:
                    continue
                sums["flow"] += report.loss_flow or 0.0
                sums["ce"] += report.loss_ce or 0.0
                sums["loss"] += report.loss
                sums["n"] += 1
                self._log(
                    {
                        "step": report.step, "epoch": report.epoch, "lr": report.lr,
                        "loss_flow": report.loss_flow, "loss_ce": report.loss_ce,
                        "loss": report.loss, "wall_time": round(time.monotonic() - t0, 3),
                    }
                )
            n = max(sums["n"], 1)
            entry = {
                "epoch": self.epoch,
                "lr": lr_schedule(self.cfg, self.epoch),
                "mean_flow": sums["flow"] / n,
                "mean_ce": sums["ce"] / n,
                "mean_loss": sums["loss"] / n,
            }
            if epoch_end_fn is not None:
                entry["held_out"] = epoch_end_fn(self.bundle)
            self.history.append(entry)
            self._log({"epoch_summary": entry})
            self.epoch += 1
            self.epoch_step = 0
        return self.history

    # -- persistence -----------------------------------------------------------

    def save_checkpoint(self, path):
        path = Path(path)
        arrays: dict[str, np.ndarray] = {}
        for name, p in self._trainable.items():
            arrays[f"param.{name}"] = p.detach().cpu().numpy()
        for name, p in self._trainable.items():
            state = self.optimizer.state.get(p)
            if state:
                arrays[f"adam.step.{name}"] = np.asarray(state["step"])
                arrays[f"adam.exp_avg.{name}"] = state["exp_avg"].cpu().numpy()
                arrays[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"].cpu().numpy()
        include_base = self.external_init is None
        if include_base:
            for name, arr in self.frozen_arrays().items():
                arrays[f"frozen.{name}"] = arr
        arrays["rng.torch"] = self.torch_rng.get_state().numpy()
        meta = {
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "step": self.step,
            "epoch": self.epoch,
            "epoch_step": self.epoch_step,
            "consecutive_skips": self.consecutive_skips,
            "config": asdict(self.cfg),
            "includes_base": include_base,
            "external_init": self.external_init,
            "frozen_fingerprint": archive_fingerprint(self.frozen_arrays()),
            "history": self.history,
        }
        save_archive(path / "arrays", arrays)
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def load_checkpoint(self, path):
        path = Path(path)
        meta_path = path / "meta.json"
        if not meta_path.exists():
            raise CheckpointError(f"no checkpoint at {path}")
        meta = json.loads(meta_path.read_text())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}"
            )
        if meta["stage"] != self.stage:
            raise CheckpointError(f"checkpoint stage {meta['stage']!r} != trainer stage {self.stage!r}")
        arrays = load_archive(path / "arrays")
        with torch.no_grad():
            for name, p in self._trainable.items():
                key = f"param.{name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint missing parameter {name!r}")
                p.copy_(torch.from_numpy(arrays[key]))
            if meta["includes_base"]:
                for name, p in self._all_params().items():
                    key = f"frozen.{name}"
                    if key in arrays:
                        p.copy_(torch.from_numpy(arrays[key]))
            elif meta["frozen_fingerprint"] != archive_fingerprint(self.frozen_arrays()):
                raise CheckpointError(
                    "frozen weights differ from the ones this checkpoint was trained with"
                )
        for name, p in self._trainable.items():
            key = f"adam.step.{name}"
            if key in arrays:
                self.optimizer.state[p] = {
                    "step": torch.from_numpy(arrays[key].copy()),
                    "exp_avg": torch.from_numpy(arrays[f"adam.exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam.exp_avg_sq.{name}"].copy()),
                }
        self.torch_rng.set_state(torch.from_numpy(arrays["rng.torch"].copy()))
        self.step = int(meta["step"])
        self.epoch = int(meta["epoch"])
        self.epoch_step = int(meta["epoch_step"])
        self.consecutive_skips = int(meta["consecutive_skips"])
        self.history = list(meta["history"])
        return meta


def held_out_losses(
    bundle: ModelBundle,
    examples: list[MixtureExample],
    ablations: AblationSwitches | None = None,
    seed: int = 1234,
    n_mc: int = 4,
    crop_seconds: float | None = None,
) -> dict:
    """Deterministic flow / transcription losses on a frozen example list."""
    ablations = ablations or AblationSwitches()
    switches = ablations.prompt_switches()
    rng = torch.Generator().manual_seed(seed)
    feats = bundle.features
    flow_terms, ce_terms = [], []
    with torch.no_grad():
        for ex in examples:
            mixture = fix_length(ex.mixture, crop_seconds) if crop_seconds else ex.mixture
            target = fix_length(ex.target, crop_seconds) if crop_seconds else ex.target
            mix_mel = mel_tensor(mixture, feats)
            tgt_mel = mel_tensor(target, feats)
            enroll_mel = mel_tensor(ex.enrollment, feats)
            spk = torch.from_numpy(np.asarray(bundle.embedder.embed(ex.enrollment), dtype=np.float32))
            speech = bundle.encoder.encode_target(
                mix_mel.unsqueeze(0),
                enroll_mel.unsqueeze(0) if switches.use_enrollment else None,
                spk.unsqueeze(0) if switches.use_speaker else None,
                switches,
            )
            cond = FlowConditioning(
                tokens=upsample_tokens(
                    speech.transpose(1, 2), tgt_mel.shape[-1], bundle.flow.cfg.upsample_mode
                ),
                speaker=spk.unsqueeze(0),
            )
            flow_terms.append(
                float(
                    cfm_loss(
                        bundle.flow, tgt_mel.unsqueeze(0), cond, rng,
                        sigma=bundle.flow.cfg.sigma, n_mc=n_mc,
                    )
                )
            )
            ce_terms.append(
                float(
                    batch_ce_loss(
                        bundle.decoder, speech,
                        [TranscriptTokens(body=list(ex.transcript))],
                    )
                )
            )
    flow_mean = float(np.mean(flow_terms))
    ce_mean = float(np.mean(ce_terms))
    return {"flow": flow_mean, "ce": ce_mean, "joint": flow_mean + ce_mean}


def export_base_weights(bundle: ModelBundle, out_dir):
    """Write the pretrained-weights archive pair (encoder base + decoder)."""
    out_dir = Path(out_dir)
    bundle.encoder.save_base(out_dir / "encoder_base")
    save_archive(
        out_dir / "decoder",
        {n: p.detach().cpu().numpy() for n, p in bundle.decoder.named_parameters()},
    )


def load_base_weights(bundle: ModelBundle, init_dir):
    """Populate encoder base weights and decoder from an init archive pair."""
    init_dir = Path(init_dir)
    enc = load_pretrained(init_dir / "encoder_base", bundle.encoder.cfg)
    bundle.encoder.load_state_dict(enc.state_dict())
    dec_arrays = load_archive(init_dir / "decoder")
    params = dict(bundle.decoder.named_parameters())
    missing = sorted(set(params) - set(dec_arrays))
    extra = sorted(set(dec_arrays) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"decoder archive mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    with torch.no_grad():
        for name, p in params.items():
            arr = torch.from_numpy(dec_arrays[name])
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"decoder {name!r}: archive shape {tuple(arr.shape)} != model {tuple(p.shape)}"
                )
            p.copy_(arr)


def load_model_for_inference(bundle: ModelBundle, ckpt_path, init_dir=None) -> dict:
    """Populate a freshly built bundle from a training checkpoint.

    Frozen weights come from the checkpoint itself when bundled, otherwise
    from init_dir (defaulting to the path recorded at training time); the
    recorded fingerprint is verified either way.
    """
    ckpt_path = Path(ckpt_path)
    meta_path = ckpt_path / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"no checkpoint at {ckpt_path}")
    meta = json.loads(meta_path.read_text())
    arrays = load_archive(ckpt_path / "arrays")
    cfg = TrainConfig(**{**meta["config"], "ablations": AblationSwitches(**meta["config"]["ablations"])})
    trainer = Trainer(bundle, Corpus([]), cfg, stage=meta["stage"],
                      external_init=meta.get("external_init"))
    if not meta["includes_base"]:
        init_dir = init_dir or meta.get("external_init")
        if not init_dir:
            raise CheckpointError("checkpoint has no bundled base weights; pass init_dir")
        load_base_weights(bundle, init_dir)
    with torch.no_grad():
        for name, p in trainer._trainable.items():
            key = f"param.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            p.copy_(torch.from_numpy(arrays[key]))
        if meta["includes_base"]:
            for name, p in trainer._all_params().items():
                key = f"frozen.{name}"
                if key in arrays:
                    p.copy_(torch.from_numpy(arrays[key]))
        if meta["frozen_fingerprint"] != archive_fingerprint(trainer.frozen_arrays()):
            raise CheckpointError("frozen weights do not match the checkpoint fingerprint")
    bundle.eval_mode()
    return meta
