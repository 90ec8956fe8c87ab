"""Beam-search decoding of a split and BLEU scoring."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import tensor as T
from .bleu import CHAR_LEVEL_LANGUAGES, corpus_stats
from .checkpoint import Checkpoint, load_checkpoint
from .data import Dataset, ManifestRow, make_batch
from .decoder import beam_search, greedy_decode
from .nn import ConfigurationError
from .pipeline import SpeechTranslationModel
from .training import model_from_checkpoint, validate


@dataclass
class EvalReport:
    bleu: float
    per_language: dict[str, float]
    token_acc: float
    valid_loss: float
    hypotheses: list[str] = field(default_factory=list)
    references: list[str] = field(default_factory=list)

    def render(self) -> str:
        lines = [f"BLEU\t{self.bleu:.2f}", f"token_acc\t{self.token_acc:.4f}", f"loss\t{self.valid_loss:.4f}"]
        lines += [f"BLEU[{lang}]\t{score:.2f}" for lang, score in sorted(self.per_language.items())]
        return "\n".join(lines)


def decode_rows(model: SpeechTranslationModel, ds: Dataset, rows: Sequence[ManifestRow], beam: int = 5,
                max_len: int = 32, batch_size: int = 50) -> list[list[int]]:
    """Token ids (terminal ``</s>`` removed) for every row, in order."""
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(rows), batch_size):
            chunk = rows[i:i + batch_size]
            b = make_batch(ds, chunk)
            mem, lengths, _ = model.encode(b.waves, b.wave_lengths)
            for j, row in enumerate(chunk):
                memory = mem[j, :int(lengths[j])]
                lang = ds.vocab.lang_id(row.tgt_lang)
                if beam == 1:
                    hyp = greedy_decode(model.decoder, memory, lang, max_len)
                else:
                    hyp = beam_search(model.decoder, memory, lang, beam, max_len)[0]
                out.append([t for t in hyp.tokens if t != ds.vocab.eos_id])
    return out


def evaluate(model: SpeechTranslationModel | Checkpoint | str | Path, ds: Dataset, split: str = "test",
             beam: int = 5, max_len: int = 32, pairs: Sequence[str] | None = None,
             label_smoothing: float = 0.3) -> EvalReport:
    """Corpus BLEU overall and per target language, plus teacher-forced token accuracy.

    Overall BLEU pools n-gram statistics over all rows; a target language in
    ``CHAR_LEVEL_LANGUAGES`` is scored on characters, both in its own entry
    and in the pooled total.
    """
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(model, Checkpoint):
        model, _, _ = model_from_checkpoint(model)
    rows = ds.splits.get(split, [])
    if pairs:
        rows = [r for r in rows if r.pair in pairs]
    if not rows:
        raise ValueError(f"split {split!r} has no rows to evaluate")
    tags = set(model.decoder.config.languages)
    unknown = sorted({r.tgt_lang for r in rows} - tags)
    if unknown:
        raise ConfigurationError(f"target languages {unknown} have no tag in the model (has {sorted(tags)})")
    hyps = [ds.vocab.decode(ids) for ids in decode_rows(model, ds, rows, beam, max_len)]
    refs = [ds.vocab.decode(r.tgt_text) for r in rows]
    pooled, per_lang = None, {}
    for lang in dict.fromkeys(r.tgt_lang for r in rows):
        idx = [i for i, r in enumerate(rows) if r.tgt_lang == lang]
        st = corpus_stats([hyps[i] for i in idx], [refs[i] for i in idx], lang in CHAR_LEVEL_LANGUAGES)
        per_lang[lang] = st.score()
        if pooled is None:
            pooled = st
        else:
            pooled += st
    loss, acc = validate(model, ds, rows, label_smoothing)
    return EvalReport(pooled.score(), per_lang, acc, loss, hyps, refs)
