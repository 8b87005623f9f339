"""Convert raw samples into the fixed-shape inputs the model consumes.

Vision becomes a 48x3x224x224 float stack in [0, 1]; audio becomes a
(T, 128) log-mel grid rescaled to [0, 1] with T truncated to a multiple of
16; title and comments become integer token sequences capped at 16 ids per
sentence. A prepared corpus directory mirrors the raw manifest format plus
a ``tokens.json`` sidecar and ``vocab.json``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .corpus import MAX_COMMENTS, DatasetManifest, ManifestEntry, RawSample, load_manifest, load_raw_sample, save_manifest

FRAME_COUNT = 48
FRAME_SIZE = 224
MEL_BINS = 128
MEL_HOP = 512
MEL_NFFT = 2048
SAMPLE_RATE = 8000
MEL_FMAX = 4000.0
DB_RANGE = 80.0
MAX_SENTENCE_TOKENS = 16
AUDIO_TIME_PATCH = 16


@dataclass(frozen=True)
class Modalities:
    """Which of the four channels participate: vision, audio, title, comments."""

    vision: bool = True
    audio: bool = True
    title: bool = True
    comments: bool = True

    _ORDER = ("V", "A", "T", "C")

    @classmethod
    def parse(cls, text: str) -> "Modalities":
        parts = [p.strip().upper() for p in re.split(r"[+,]", text) if p.strip()]
        unknown = [p for p in parts if p not in cls._ORDER]
        if unknown:
            raise ValueError(f"unknown modality letters {unknown}; use V, A, T, C")
        if not parts:
            raise ValueError("at least one modality required")
        return cls("V" in parts, "A" in parts, "T" in parts, "C" in parts)

    def label(self) -> str:
        flags = (self.vision, self.audio, self.title, self.comments)
        return "+".join(m for m, f in zip(self._ORDER, flags) if f)

    def video_branch(self) -> bool:
        return self.vision or self.audio

    def language_branch(self) -> bool:
        return self.title or self.comments

    def intersect(self, other: "Modalities") -> "Modalities":
        return Modalities(
            self.vision and other.vision,
            self.audio and other.audio,
            self.title and other.title,
            self.comments and other.comments,
        )

    @classmethod
    def combinations(cls, min_size: int = 2) -> list["Modalities"]:
        out = []
        for bits in range(1, 16):
            flags = [(bits >> i) & 1 == 1 for i in range(3, -1, -1)]
            if sum(flags) >= min_size:
                out.append(cls(*flags))
        return out


# ---------------------------------------------------------------------------
# vision
# ---------------------------------------------------------------------------

def sample_frames(vision: np.ndarray, n: int = FRAME_COUNT) -> np.ndarray:
    """Uniformly pick ``n`` frames; index k maps to round(k*(F-1)/(n-1))."""
    if vision.ndim != 4 or vision.shape[0] == 0:
        raise ValueError(f"expected a non-empty (F, C, H, W) stack, got {vision.shape}")
    count = vision.shape[0]
    if n == 1:
        idx = np.zeros(1, dtype=np.int64)
    else:
        pos = np.arange(n, dtype=np.float64) * (count - 1) / (n - 1)
        idx = np.floor(pos + 0.5).astype(np.int64)  # round half up
    return vision[idx]


def resize_frames(frames: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Bilinear spatial resize to (F, 3, size, size) float32 in [0, 1]."""
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected (F, 3, H, W), got {frames.shape}")
    if frames.shape[2] <= 0 or frames.shape[3] <= 0:
        raise ValueError(f"non-positive spatial dimensions: {frames.shape}")
    x = frames.astype(np.float32)
    if frames.dtype == np.uint8:
        x = x / 255.0
    if frames.shape[2] == size and frames.shape[3] == size:
        return x
    t = torch.from_numpy(x)
    t = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t.numpy()


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = MEL_BINS, n_fft: int = MEL_NFFT,
                   rate: int = SAMPLE_RATE, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular filters (peak 1.0) on the mel scale, (n_mels, n_fft//2+1)."""
    freqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * rate / n_fft
    anchors = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = anchors[m], anchors[m + 1], anchors[m + 2]
        up = (freqs - left) / max(center - left, 1e-12)
        down = (right - freqs) / max(right - center, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def log_mel(waveform: np.ndarray, rescale: bool = True) -> np.ndarray:
    """Log-mel grid for a mono 8 kHz waveform.

    Frame k covers samples centred at k*hop (reflect padding), giving
    T = len(waveform) // hop frames, truncated down to a multiple of 16.
    The decibel grid is floored at (max - 80 dB); with ``rescale`` the floor
    maps to 0 and the maximum to 1 (all-silent input maps to all zeros).
    """
    w = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if w.size < MEL_NFFT:
        raise ValueError(f"waveform too short: {w.size} samples < one {MEL_NFFT}-sample window")
    n_frames = w.size // MEL_HOP
    padded = np.pad(w, MEL_NFFT // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, MEL_NFFT)[::MEL_HOP][:n_frames]
    window = np.hanning(MEL_NFFT)
    spectrum = np.fft.rfft(frames * window, axis=1)
    power = np.abs(spectrum) ** 2
    mel_power = power @ mel_filterbank().T

    keep = (n_frames // AUDIO_TIME_PATCH) * AUDIO_TIME_PATCH
    mel_power = mel_power[:keep]
    db = 10.0 * np.log10(np.maximum(mel_power, 1e-20))
    if not rescale:
        return db
    if mel_power.max(initial=0.0) <= 1e-12:
        return np.zeros_like(db, dtype=np.float32)
    floor = db.max() - DB_RANGE
    return np.clip((db - floor) / DB_RANGE, 0.0, 1.0).astype(np.float32)


def normalize_mel_grid(mel: np.ndarray) -> np.ndarray:
    """Min-max rescale a precomputed log-mel grid to [0, 1], T to multiple of 16."""
    if mel.ndim != 2 or mel.shape[1] != MEL_BINS:
        raise ValueError(f"expected (frames, {MEL_BINS}), got {mel.shape}")
    keep = (mel.shape[0] // AUDIO_TIME_PATCH) * AUDIO_TIME_PATCH
    if keep == 0:
        raise ValueError(f"mel grid too short: {mel.shape[0]} frames < {AUDIO_TIME_PATCH}")
    grid = mel[:keep].astype(np.float64)
    low, high = grid.min(), grid.max()
    if high - low <= 1e-12:
        return np.zeros_like(grid, dtype=np.float32)
    return ((grid - low) / (high - low)).astype(np.float32)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, CLS, SEP, UNK)
_DROPPED_HASHTAGS = (re.compile(r"#funny\s+video\b"), re.compile(r"#funny\b"))
_TOKEN_RE = re.compile(r"[a-z0-9']+")


class Tokenizer:
    """Lowercased word tokenizer with a corpus-built vocabulary.

    Ids 0..3 are reserved for [PAD], [CLS], [SEP], [UNK]. The two promotional
    hashtags are stripped before splitting.
    """

    def __init__(self, vocab: dict[str, int]):
        for i, tok in enumerate(RESERVED):
            if vocab.get(tok) != i:
                raise ValueError(f"vocab must map {tok} to id {i}")
        ids = list(vocab.values())
        if len(set(ids)) != len(ids):
            raise ValueError("vocab ids must be unique")
        self.vocab = dict(vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @staticmethod
    def split(text: str) -> list[str]:
        text = text.lower()
        for pattern in _DROPPED_HASHTAGS:
            text = pattern.sub(" ", text)
        return _TOKEN_RE.findall(text)

    def encode(self, text: str, max_len: int | None = MAX_SENTENCE_TOKENS) -> list[int]:
        words = self.split(text)
        if max_len is not None:
            words = words[:max_len]
        return [self.vocab.get(w, self.unk_id) for w in words]

    @classmethod
    def build(cls, texts, max_size: int = 4096) -> "Tokenizer":
        counts: dict[str, int] = {}
        for text in texts:
            for w in cls.split(text):
                counts[w] = counts.get(w, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        vocab = {tok: i for i, tok in enumerate(RESERVED)}
        for word, _ in ranked[: max(0, max_size - len(RESERVED))]:
            vocab[word] = len(vocab)
        return cls(vocab)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.vocab, indent=0, ensure_ascii=False), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def tokenize(title: str, comments: list[str], tokenizer: Tokenizer,
             max_len: int = MAX_SENTENCE_TOKENS,
             max_comments: int = MAX_COMMENTS) -> tuple[list[int], list[list[int]]]:
    """Token ids for title and comments; empty sentences are dropped."""
    title_ids = tokenizer.encode(title, max_len)
    comment_ids = []
    for text in comments[:max_comments]:
        ids = tokenizer.encode(text, max_len)
        if ids:
            comment_ids.append(ids)
    return title_ids, comment_ids


# ---------------------------------------------------------------------------
# processed samples and the prep pipeline
# ---------------------------------------------------------------------------

@dataclass
class ProcessedSample:
    id: str
    vision: np.ndarray  # (48, 3, 224, 224) float32 in [0, 1]
    mel: np.ndarray  # (T, 128) float32 in [0, 1], T % 16 == 0
    title_tokens: list[int]
    comment_tokens: list[list[int]]
    label: int | None = None

    def presence(self) -> Modalities:
        return Modalities(
            vision=True,
            audio=True,
            title=bool(self.title_tokens),
            comments=bool(self.comment_tokens),
        )

    def validate(self, vocab_size: int | None = None) -> None:
        if self.vision.shape != (FRAME_COUNT, 3, FRAME_SIZE, FRAME_SIZE):
            raise ValueError(f"{self.id}: vision shape {self.vision.shape}")
        if self.mel.ndim != 2 or self.mel.shape[1] != MEL_BINS or self.mel.shape[0] % AUDIO_TIME_PATCH:
            raise ValueError(f"{self.id}: mel shape {self.mel.shape}")
        if len(self.title_tokens) > MAX_SENTENCE_TOKENS:
            raise ValueError(f"{self.id}: title too long")
        if len(self.comment_tokens) > MAX_COMMENTS:
            raise ValueError(f"{self.id}: too many comments")
        if any(len(c) > MAX_SENTENCE_TOKENS or not c for c in self.comment_tokens):
            raise ValueError(f"{self.id}: bad comment token lists")
        if vocab_size is not None:
            all_ids = list(self.title_tokens) + [i for c in self.comment_tokens for i in c]
            if any(not 0 <= i < vocab_size for i in all_ids):
                raise ValueError(f"{self.id}: token id out of range")


def prep_corpus(manifest: DatasetManifest, out_dir: str | Path,
                tokenizer: Tokenizer | None = None, vocab_size: int = 4096) -> Path:
    """Process every manifest entry into ``out_dir``.

    Vision already in canonical (48, 3, 224, 224) uint8 form is referenced in
    place rather than copied; anything else is frame-sampled, resized and
    stored as float32. The prep manifest keeps the raw record schema so it
    can be re-read with ``load_manifest``.
    """
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)

    if tokenizer is None:
        texts = []
        for e in manifest.entries:
            texts.append(e.title)
            texts.extend(e.comments)
        tokenizer = Tokenizer.build(texts, max_size=vocab_size)
    tokenizer.save(out_dir / "vocab.json")

    entries: list[ManifestEntry] = []
    tokens: dict[str, dict] = {}
    for entry in manifest.entries:
        raw = load_raw_sample(manifest, entry)

        canonical = raw.vision.shape == (FRAME_COUNT, 3, FRAME_SIZE, FRAME_SIZE)
        if canonical:
            vision_rel = os.path.relpath(manifest.resolve(entry.vision), out_dir)
        else:
            stack = sample_frames(raw.vision, FRAME_COUNT)
            stack = resize_frames(stack, FRAME_SIZE)
            vision_rel = f"tensors/{entry.id}.vision.cvt"
            container.write_tensor(out_dir / vision_rel, stack)

        if raw.waveform is not None:
            mel = log_mel(raw.waveform)
        else:
            mel = normalize_mel_grid(raw.mel)
        mel_rel = f"tensors/{entry.id}.mel.cvt"
        container.write_tensor(out_dir / mel_rel, mel)

        title_ids, comment_ids = tokenize(entry.title, entry.comments, tokenizer)
        tokens[entry.id] = {"title": title_ids, "comments": comment_ids}
        entries.append(
            ManifestEntry(
                id=entry.id,
                vision=vision_rel,
                audio=mel_rel,
                title=entry.title,
                comments=list(entry.comments),
                label=entry.label,
            )
        )

    prepared = DatasetManifest(
        entries=entries,
        provenance=f"prep({manifest.provenance})",
        seed=manifest.seed,
        root=out_dir,
    )
    save_manifest(prepared, out_dir)
    (out_dir / "tokens.json").write_text(json.dumps(tokens, ensure_ascii=False), encoding="utf-8")
    return out_dir


class PrepDataset:
    """Random access over a prepared corpus directory."""

    def __init__(self, prep_dir: str | Path):
        self.root = Path(prep_dir)
        self.manifest = load_manifest(self.root / "manifest.jsonl")
        self.tokenizer = Tokenizer.load(self.root / "vocab.json")
        self._tokens = json.loads((self.root / "tokens.json").read_text(encoding="utf-8"))
        self._by_id = {e.id: e for e in self.manifest.entries}

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.manifest.entries]

    @property
    def unlabeled_ids(self) -> list[str]:
        return [e.id for e in self.manifest.entries if e.label is None]

    @property
    def labeled_ids(self) -> list[str]:
        return [e.id for e in self.manifest.entries if e.label is not None]

    def label(self, sample_id: str) -> int | None:
        return self._by_id[sample_id].label

    def vocab_size(self) -> int:
        return len(self.tokenizer)

    def load(self, sample_id: str) -> ProcessedSample:
        entry = self._by_id[sample_id]
        vision = container.read_tensor(self.manifest.resolve(entry.vision))
        if vision.dtype == np.uint8:
            vision = vision.astype(np.float32) / 255.0
        mel = container.read_tensor(self.manifest.resolve(entry.audio)).astype(np.float32)
        tok = self._tokens[entry.id]
        sample = ProcessedSample(
            id=entry.id,
            vision=vision,
            mel=mel,
            title_tokens=list(tok["title"]),
            comment_tokens=[list(c) for c in tok["comments"]],
            label=entry.label,
        )
        sample.validate(len(self.tokenizer))
        return sample

    def split(self, sizes: tuple[int, int, int], seed: int):
        from .corpus import split_labeled

        return split_labeled(self.manifest, sizes, seed)
