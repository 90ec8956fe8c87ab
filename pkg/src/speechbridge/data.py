"""Manifests, synthetic speech-translation tasks and batching."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import Vocabulary
from .rng import Rng
from .speech import SAMPLE_RATE, read_wav, write_wav

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "audio", "n_frames", "src_lang", "tgt_lang", "tgt_text")
MAX_FRAMES = 3000
SPLITS = ("train", "valid", "test")
# single-character tokens keep word- and character-level scoring meaningful
DEFAULT_SYMBOLS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    id: str
    audio: str
    n_frames: int
    src_lang: str
    tgt_lang: str
    tgt_text: list[int]

    @property
    def pair(self) -> str:
        return f"{self.src_lang}-{self.tgt_lang}"


class Manifest(list):
    """List of rows plus the number of rows dropped by the frame filter."""
    excluded: int = 0


def load_manifest(path: str | Path, vocab: Vocabulary, max_frames: int = MAX_FRAMES) -> Manifest:
    """Read a TSV manifest, dropping rows with more than ``max_frames`` frames."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = Manifest()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {' '.join(MANIFEST_COLUMNS)!r}, got {header!r}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(rec)}")
            uid, audio, n_frames, src, tgt, text = rec
            try:
                n = int(n_frames)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: n_frames {n_frames!r} is not an integer") from None
            if n <= 0:
                raise ManifestError(f"{path}:{lineno}: n_frames must be positive")
            try:
                vocab.lang_id(tgt)
                ids = vocab.encode(text)
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            if n > max_frames:
                rows.excluded += 1
                continue
            rows.append(ManifestRow(uid, audio, n, src, tgt, ids))
    if rows.excluded:
        log.info("%s: excluded %d rows with more than %d frames", path, rows.excluded, max_frames)
    if not rows:
        warnings.warn(f"{path}: manifest has no usable rows", stacklevel=2)
    return rows


def write_manifest(path: str | Path, rows: Sequence[ManifestRow], vocab: Vocabulary) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.id, r.audio, r.n_frames, r.src_lang, r.tgt_lang,
                        vocab.decode(r.tgt_text, drop_special=False)])


@dataclass
class SynthTaskSpec:
    vocab_size: int = 32
    pairs: list[str] = field(default_factory=lambda: ["en-de"])
    frames_per_token: int = 16
    samples_per_frame: int = 16
    noise_level: float = 0.05
    reverse_languages: list[str] = field(default_factory=list)
    identity_languages: list[str] = field(default_factory=list)
    min_tokens: int = 4
    max_tokens: int = 7
    train_count: int = 2000
    valid_count: int = 200
    test_count: int = 200
    size_multipliers: list[float] = field(default_factory=list)
    pretrain_sentences: int = 4000

    def __post_init__(self):
        if self.vocab_size > len(DEFAULT_SYMBOLS):
            raise ValueError(f"vocab_size limited to {len(DEFAULT_SYMBOLS)} single-character symbols")
        if self.size_multipliers and len(self.size_multipliers) != len(self.pairs):
            raise ValueError("size_multipliers needs one entry per pair")
        for p in self.pairs:
            if p.count("-") != 1:
                raise ValueError(f"pair {p!r} must look like 'src-tgt'")

    @property
    def template_samples(self) -> int:
        return self.frames_per_token * self.samples_per_frame

    @property
    def source_languages(self) -> list[str]:
        return list(dict.fromkeys(p.split("-")[0] for p in self.pairs))

    @property
    def target_languages(self) -> list[str]:
        return list(dict.fromkeys(p.split("-")[1] for p in self.pairs))

    def train_counts(self) -> list[int]:
        if not self.size_multipliers:
            return [self.train_count] * len(self.pairs)
        top = max(self.size_multipliers)
        return [max(1, int(round(self.train_count * m / top))) for m in self.size_multipliers]


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: dict[str, list[ManifestRow]]
    waveforms: dict[str, np.ndarray]
    text_corpus: list[tuple[np.ndarray, str]] = field(default_factory=list)
    spec: SynthTaskSpec | None = None

    def wave(self, row: ManifestRow) -> np.ndarray:
        if row.id not in self.waveforms:
            self.waveforms[row.id] = read_wav(row.audio)
        return self.waveforms[row.id]

    @property
    def target_languages(self) -> list[str]:
        return list(self.vocab.languages)


class SynthTask:
    """Deterministic generator: per-token waveform templates and per-language target maps."""

    def __init__(self, spec: SynthTaskSpec, seed: int):
        self.spec = spec
        self.seed = seed
        root = Rng(seed)
        v = spec.vocab_size
        self.templates = {lang: self._templates(root.child(f"templates/{lang}"))
                          for lang in spec.source_languages}
        self.maps = {}
        for lang in spec.target_languages:
            perm = np.arange(v) if lang in spec.identity_languages else root.child(f"map/{lang}").permutation(v)
            self.maps[lang] = perm
        self.vocab = Vocabulary(spec.target_languages, list(DEFAULT_SYMBOLS[:v]))

    def _templates(self, rng: Rng) -> np.ndarray:
        n = self.spec.template_samples
        t = np.arange(n) / SAMPLE_RATE
        out = np.zeros((self.spec.vocab_size, n))
        for i in range(self.spec.vocab_size):
            freqs = rng.uniform(200.0, 4000.0, 3)
            phases = rng.uniform(0, 2 * np.pi, 3)
            amps = rng.uniform(0.1, 0.3, 3)
            out[i] = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
        return out

    def target(self, src_tokens: np.ndarray, tgt_lang: str) -> np.ndarray:
        mapped = self.maps[tgt_lang][src_tokens]
        if tgt_lang in self.spec.reverse_languages:
            mapped = mapped[::-1]
        return mapped + self.vocab.content_offset

    def waveform(self, src_tokens: np.ndarray, src_lang: str, rng: Rng) -> np.ndarray:
        w = self.templates[src_lang][src_tokens].reshape(-1)
        if self.spec.noise_level > 0:
            w = w + rng.normal(w.shape, scale=self.spec.noise_level)
        return w


def synth_generate(spec: SynthTaskSpec, seed: int) -> Dataset:
    """Build train/valid/test splits plus a monolingual target-side text corpus."""
    task = SynthTask(spec, seed)
    root = Rng(seed)
    splits: dict[str, list[ManifestRow]] = {s: [] for s in SPLITS}
    waves: dict[str, np.ndarray] = {}
    train_counts = spec.train_counts()
    for pi, pair in enumerate(spec.pairs):
        src, tgt = pair.split("-")
        for split in SPLITS:
            count = {"train": train_counts[pi], "valid": spec.valid_count, "test": spec.test_count}[split]
            rng = root.child(f"{split}/{pair}")
            for i in range(count):
                length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
                toks = rng.integers(0, spec.vocab_size, length)
                uid = f"{split}-{pair}-{i:05d}"
                w = task.waveform(toks, src, rng)
                waves[uid] = w
                splits[split].append(ManifestRow(uid, f"synth:{seed}:{uid}", len(w) // spec.samples_per_frame,
                                                 src, tgt, [int(t) for t in task.target(toks, tgt)]))
    corpus = []
    for tgt in spec.target_languages:
        rng = root.child(f"text/{tgt}")
        for _ in range(spec.pretrain_sentences):
            length = int(rng.integers(spec.min_tokens, 2 * spec.max_tokens + 1))
            corpus.append((rng.integers(0, spec.vocab_size, length) + task.vocab.content_offset, tgt))
    return Dataset(task.vocab, splits, waves, corpus, spec)


def write_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write WAV files, per-split TSV manifests, the vocabulary and the text corpus."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    ds.vocab.save(out / "vocab.txt")
    for split, rows in ds.splits.items():
        written = []
        for r in rows:
            wav = out / "audio" / f"{r.id}.wav"
            write_wav(wav, ds.waveforms[r.id])
            written.append(ManifestRow(r.id, str(wav.relative_to(out)), r.n_frames, r.src_lang, r.tgt_lang, r.tgt_text))
        write_manifest(out / f"{split}.tsv", written, ds.vocab)
    with (out / "text.tsv").open("w", encoding="utf-8") as fh:
        for ids, lang in ds.text_corpus:
            fh.write(f"{lang}\t{ds.vocab.decode(ids)}\n")
    return out


def load_dataset_dir(path: str | Path, max_frames: int = MAX_FRAMES) -> Dataset:
    root = Path(path)
    vocab = Vocabulary.load(root / "vocab.txt")
    splits = {}
    for split in SPLITS:
        f = root / f"{split}.tsv"
        if not f.exists():
            continue
        rows = load_manifest(f, vocab, max_frames)
        for r in rows:
            if not Path(r.audio).is_absolute():
                r.audio = str(root / r.audio)
        splits[split] = list(rows)
    corpus = []
    text = root / "text.tsv"
    if text.exists():
        for line in text.read_text(encoding="utf-8").splitlines():
            lang, _, body = line.partition("\t")
            corpus.append((np.array(vocab.encode(body), dtype=np.int64), lang))
    return Dataset(vocab, splits, {}, corpus)


@dataclass
class Batch:
    waves: np.ndarray
    wave_lengths: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    rows: list[ManifestRow]


def make_batch(ds: Dataset, rows: Sequence[ManifestRow]) -> Batch:
    from .decoder import teacher_forcing_batch
    waves = [ds.wave(r) for r in rows]
    lengths = np.array([len(w) for w in waves], dtype=np.int64)
    out = np.zeros((len(rows), lengths.max()))
    for i, w in enumerate(waves):
        out[i, :len(w)] = w
    dec_in, dec_out = teacher_forcing_batch([r.tgt_text for r in rows],
                                            [ds.vocab.lang_id(r.tgt_lang) for r in rows],
                                            ds.vocab.pad_id, ds.vocab.eos_id)
    return Batch(out, lengths, dec_in, dec_out, list(rows))


class BatchSampler:
    """Epoch-wise shuffled batches drawn uniformly over all rows (pairs mix by size)."""

    def __init__(self, rows: Sequence[ManifestRow], batch_size: int, rng: Rng):
        if not rows:
            raise ValueError("no training rows")
        self.rows = list(rows)
        self.batch_size = min(batch_size, len(self.rows))
        self.rng = rng
        self._order: list[int] = []

    def next(self) -> list[ManifestRow]:
        if len(self._order) < self.batch_size:
            self._order.extend(int(i) for i in self.rng.permutation(len(self.rows)))
        pick, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return [self.rows[i] for i in pick]
