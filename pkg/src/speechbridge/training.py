"""Pretraining, finetuning with a learning-rate sweep, and best-checkpoint selection."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import BatchSampler, Dataset, ManifestRow, make_batch, synth_generate, load_dataset_dir
from .decoder import TextEncoder, Vocabulary, pretrain_denoising
from .finetune import EmptyTrainableSetWarning, FinetuneStrategy, select_trainable
from .nn import label_smoothed_ce
from .optim import Adam, AdamConfig
from .pipeline import ModelConfig, SpeechTranslationModel, token_accuracy
from .rng import Rng
from .speech import ContrastiveHead, pretrain_contrastive

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("lr", "step", "wall_time", "train_loss", "valid_loss", "token_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class CurvePoint:
    lr: float
    step: int
    wall_time: float
    train_loss: float
    valid_loss: float
    token_acc: float


@dataclass
class CandidateResult:
    lr: float
    failed: bool = False
    reason: str = ""
    best_valid: float = math.inf
    best_step: int = 0
    curve: list[CurvePoint] = field(default_factory=list)
    best_state: dict[str, np.ndarray] | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: SpeechTranslationModel
    best_lr: float
    candidates: list[CandidateResult]
    pretrain_history: dict[str, list[float]] = field(default_factory=dict)

    @property
    def curve(self) -> list[CurvePoint]:
        return [p for c in self.candidates for p in c.curve]

    def write_curve(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["\t".join(CURVE_COLUMNS)]
        for p in self.curve:
            lines.append(f"{p.lr:g}\t{p.step}\t{p.wall_time:.3f}\t{p.train_loss:.6f}\t"
                         f"{p.valid_loss:.6f}\t{p.token_acc:.4f}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


# -- datasets and models -------------------------------------------------------
def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.manifest_dir:
        return load_dataset_dir(cfg.data.manifest_dir)
    if cfg.data.synth is None:
        raise TrainingError("config names neither a manifest directory nor a synthetic task")
    return synth_generate(cfg.data.synth, cfg.data.seed)


def resolve_model_config(cfg: ModelConfig, vocab: Vocabulary) -> ModelConfig:
    """Fit the decoder's vocabulary and language tags to ``vocab``."""
    dec = dataclasses.replace(cfg.decoder, vocab_size=len(vocab), languages=list(vocab.languages))
    return dataclasses.replace(cfg, decoder=dec)


def vocab_to_dict(vocab: Vocabulary) -> dict:
    return {"languages": list(vocab.languages), "tokens": vocab.content_tokens}


def vocab_from_dict(d: dict) -> Vocabulary:
    return Vocabulary(d["languages"], d["tokens"])


def task_rows(ds: Dataset, split: str, pairs: Sequence[str] | None) -> list[ManifestRow]:
    rows = ds.splits.get(split, [])
    if pairs:
        rows = [r for r in rows if r.pair in pairs]
    return rows


def training_pairs(cfg: ExperimentConfig, ds: Dataset) -> list[str]:
    available = list(dict.fromkeys(r.pair for r in ds.splits.get("train", [])))
    pairs = list(cfg.pairs) or available
    missing = [p for p in pairs if p not in available]
    if missing:
        raise TrainingError(f"pairs {missing} have no training rows (available: {available})")
    if cfg.mode == "bilingual" and len(pairs) != 1:
        raise TrainingError(f"bilingual mode trains exactly one pair, got {pairs}")
    return pairs


# -- pretraining -----------------------------------------------------------------
_PRETRAIN_CACHE: dict[str, tuple[dict, dict, dict]] = {}


def _fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(vocab_to_dict(ds.vocab)).encode())
    for r in ds.splits.get("train", []):
        h.update(f"{r.id}|{r.audio}|{r.tgt_text}".encode())
    h.update(str(len(ds.text_corpus)).encode())
    return h.hexdigest()


def pretrain(cfg: ExperimentConfig, ds: Dataset) -> tuple[dict, dict, dict]:
    """Pretrained encoder and decoder states plus loss histories (cached per process)."""
    model_cfg = resolve_model_config(cfg.model, ds.vocab)
    # the adaptor is not pretrained, so its shape does not enter the key
    parts = {k: dataclasses.asdict(getattr(model_cfg, k)) for k in ("feature", "context", "decoder")}
    key = json.dumps({"model": parts, "pretrain": dataclasses.asdict(cfg.pretrain),
                      "seed": cfg.seed, "data": _fingerprint(ds)}, sort_keys=True, default=str)
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key]
    root = Rng(cfg.seed)
    model = SpeechTranslationModel(model_cfg, root.child("model"))
    history = {}
    if cfg.pretrain.enabled:
        waves = [ds.wave(r) for r in ds.splits.get("train", [])]
        enc_rng = root.child("pretrain/encoder")
        head = ContrastiveHead(model.encoder.dim, cfg.pretrain.encoder.quantizer, enc_rng.child("head"))
        history["contrastive"] = pretrain_contrastive(model.encoder, waves, cfg.pretrain.encoder, enc_rng, head)
        corpus = [(ids, ds.vocab.lang_id(lang)) for ids, lang in ds.text_corpus]
        if corpus:
            dec_rng = root.child("pretrain/decoder")
            text_encoder = TextEncoder(model.decoder, dec_rng.child("text_encoder"))
            history["denoising"] = pretrain_denoising(model.decoder, corpus, cfg.pretrain.decoder,
                                                      dec_rng, text_encoder)
    out = (model.encoder.state_dict(), model.decoder.state_dict(), history)
    _PRETRAIN_CACHE[key] = out
    return out


def clear_pretrain_cache() -> None:
    _PRETRAIN_CACHE.clear()


def build_model(cfg: ExperimentConfig, vocab: Vocabulary, pretrained: tuple[dict, dict, dict] | None,
                strategy: FinetuneStrategy) -> SpeechTranslationModel:
    model = SpeechTranslationModel(resolve_model_config(cfg.model, vocab), Rng(cfg.seed).child("model"))
    if pretrained is not None:
        enc, dec, _ = pretrained
        model.encoder.load_state_dict(enc)
        if not strategy.scratch_decoder:
            model.decoder.load_state_dict(dec)
    return model


# -- evaluation during training --------------------------------------------------
def batch_loss(model: SpeechTranslationModel, ds: Dataset, rows: Sequence[ManifestRow],
               epsilon: float, rng: Rng | None = None) -> tuple[T.Tensor, int, int]:
    b = make_batch(ds, rows)
    logits = model(b.waves, b.wave_lengths, b.dec_in, rng)
    loss = label_smoothed_ce(logits, b.dec_out, epsilon, ignore_index=ds.vocab.pad_id)
    hits, count = token_accuracy(logits, b.dec_out, ds.vocab.pad_id)
    return loss, hits, count


def validate(model: SpeechTranslationModel, ds: Dataset, rows: Sequence[ManifestRow], epsilon: float,
             batch_size: int = 50) -> tuple[float, float]:
    """Token-weighted label-smoothed loss and teacher-forced token accuracy."""
    if not rows:
        raise TrainingError("validation split is empty")
    was_training = model.training
    model.eval()
    total, hits, count = 0.0, 0, 0
    with T.no_grad():
        for i in range(0, len(rows), batch_size):
            loss, h, c = batch_loss(model, ds, rows[i:i + batch_size], epsilon)
            total += loss.item() * c
            hits += h
            count += c
    model.train(was_training)
    return total / count, hits / count


# -- finetuning ------------------------------------------------------------------
def _run_candidate(cfg: ExperimentConfig, ds: Dataset, lr: float, pairs: list[str],
                   pretrained, strategy: FinetuneStrategy) -> CandidateResult:
    res = CandidateResult(lr)
    model = build_model(cfg, ds.vocab, pretrained, strategy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTrainableSetWarning)
        trainable = select_trainable(model, strategy)
    params = [p for p in model.parameters() if p.name in trainable]
    opt = Adam(params, AdamConfig(lr=lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm))
    root = Rng(cfg.seed).child("finetune")
    sampler = BatchSampler(task_rows(ds, "train", pairs), cfg.batch_size, root.child("batches"))
    drop_rng = root.child("layerdrop")
    valid = task_rows(ds, "valid", pairs)
    steps = cfg.steps * (len(pairs) if cfg.mode == "multilingual" else 1)
    start = time.perf_counter()
    window: list[float] = []
    model.train()
    for step in range(1, steps + 1):
        loss, _, _ = batch_loss(model, ds, sampler.next(), cfg.label_smoothing, drop_rng)
        value = loss.item()
        if not math.isfinite(value):
            res.failed, res.reason = True, f"loss became {value} at step {step}"
            log.warning("lr %g: %s", lr, res.reason)
            return res
        if params:
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        window.append(value)
        if step % cfg.eval_interval == 0 or step == steps:
            v_loss, acc = validate(model, ds, valid, cfg.label_smoothing)
            res.curve.append(CurvePoint(lr, step, time.perf_counter() - start,
                                        float(np.mean(window)), v_loss, acc))
            window = []
            log.info("lr %g step %d train %.4f valid %.4f acc %.3f", lr, step,
                     res.curve[-1].train_loss, v_loss, acc)
            if not math.isfinite(v_loss):
                res.failed, res.reason = True, f"validation loss became {v_loss} at step {step}"
                return res
            if v_loss < res.best_valid:
                res.best_valid, res.best_step = v_loss, step
                res.best_state = model.state_dict()
                res.optimizer = {**{f"m:{p.name}": m.copy() for p, m in zip(params, opt.state()["m"])},
                                 **{f"v:{p.name}": v.copy() for p, v in zip(params, opt.state()["v"])}}
                res.optimizer_step = opt.step_count
    return res


def train(cfg: ExperimentConfig, ds: Dataset | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Sweep ``cfg.lr_candidates``; keep the lowest-validation-loss checkpoint of the best rate."""
    ds = ds if ds is not None else load_data(cfg)
    strategy = cfg.finetune_strategy()
    pairs = training_pairs(cfg, ds)
    pretrained = pretrain(cfg, ds) if cfg.pretrain.enabled else None
    candidates = []
    for lr in cfg.lr_candidates:
        candidates.append(_run_candidate(cfg, ds, float(lr), pairs, pretrained, strategy))
    done = [c for c in candidates if not c.failed and c.best_state is not None]
    if not done:
        reasons = "; ".join(f"lr {c.lr:g}: {c.reason}" for c in candidates)
        raise TrainingError(f"every learning-rate candidate failed ({reasons})")
    best = min(done, key=lambda c: c.best_valid)
    model = build_model(cfg, ds.vocab, None, strategy)
    model.load_state_dict(best.best_state)
    model.eval()
    meta = {"experiment": cfg.to_dict(), "vocab": vocab_to_dict(ds.vocab), "lr": best.lr,
            "pairs": pairs, "strategy": strategy.to_dict()}
    ckpt = Checkpoint(meta, best.best_state, best.optimizer, best.optimizer_step, best.best_step, best.best_valid)
    result = TrainResult(ckpt, model, best.lr, candidates, pretrained[2] if pretrained else {})
    out_dir = out_dir or cfg.output_dir
    if out_dir:
        out = Path(out_dir)
        save_checkpoint(out / "checkpoint_best.bin", ckpt)
        result.write_curve(out / "learning_curve.tsv")
    return result


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[SpeechTranslationModel, Vocabulary, ExperimentConfig]:
    cfg = ExperimentConfig.from_dict(copy.deepcopy(ckpt.config["experiment"]))
    vocab = vocab_from_dict(ckpt.config["vocab"])
    model = SpeechTranslationModel(resolve_model_config(cfg.model, vocab), Rng(cfg.seed).child("model"))
    model.load_state_dict(ckpt.params)
    model.eval()
    return model, vocab, cfg


def parameter_checksum(model_or_state) -> str:
    state = model_or_state if isinstance(model_or_state, dict) else model_or_state.state_dict()
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name], dtype="<f8").tobytes())
    return h.hexdigest()
