"""Sample data model, manifest ingestion, synthetic corpus generation, splits.

A corpus lives in a directory holding ``manifest.jsonl`` (one JSON record
per sample: id, vision, audio, title, comments[], label?), ``meta.json``
(provenance, seed) and a ``tensors/`` tree of CVT1 containers referenced by
the records. The synthetic generator plants a cross-modal cue in
humor-positive samples so that label structure is learnable from every
modality, with a per-modality reliability knob.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .seeding import stream

MAX_COMMENTS = 10

# text cue planted in one comment of humor-positive samples
MARKER_WORD = "hahaha"

# topic lexicon for synthetic titles/comments; sampling weights depend on the
# sample's latent topic vector so text correlates with the other modalities
LEXICON = (
    "ocean guitar sunset kitchen puppy skate train garden neon drum "
    "coffee river rooftop mirror pixel casserole marble cactus jungle lamp "
    "violin subway glacier pepper canyon robot breeze ladder pocket cloud "
    "saddle anchor raisin comet fountain tunnel meadow circuit barrel kite "
    "prism walnut harbor ember quartz thimble orbit lantern"
).split()


class ManifestError(ValueError):
    """Malformed manifest line, duplicate id, or unresolvable tensor file."""


@dataclass
class RawSample:
    """One short video's four modalities plus an optional binary label.

    ``vision`` is a uint8 frame stack (F, 3, H, W) with F >= 48. Audio is
    either a mono ``waveform`` at ``sample_rate`` 8000 Hz or a precomputed
    ``mel`` grid (frames, 128); exactly one of the two is set.
    """

    id: str
    vision: np.ndarray
    title: str
    comments: list[str]
    waveform: np.ndarray | None = None
    sample_rate: int = 8000
    mel: np.ndarray | None = None
    label: int | None = None

    def validate(self) -> None:
        if self.vision.ndim != 4 or self.vision.shape[1] != 3:
            raise ValueError(f"{self.id}: vision must be (F, 3, H, W), got {self.vision.shape}")
        if self.vision.dtype != np.uint8:
            raise ValueError(f"{self.id}: vision must be uint8, got {self.vision.dtype}")
        if self.vision.shape[0] < 48:
            raise ValueError(f"{self.id}: vision needs >= 48 frames, got {self.vision.shape[0]}")
        if (self.waveform is None) == (self.mel is None):
            raise ValueError(f"{self.id}: exactly one of waveform/mel must be set")
        if self.waveform is not None and self.sample_rate != 8000:
            raise ValueError(f"{self.id}: waveform sample rate must be 8000, got {self.sample_rate}")
        if self.mel is not None and (self.mel.ndim != 2 or self.mel.shape[1] != 128):
            raise ValueError(f"{self.id}: mel must be (frames, 128), got {self.mel.shape}")
        if len(self.comments) > MAX_COMMENTS:
            raise ValueError(f"{self.id}: at most {MAX_COMMENTS} comments, got {len(self.comments)}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"{self.id}: label must be 0 or 1, got {self.label}")


@dataclass
class ManifestEntry:
    id: str
    vision: str
    audio: str
    title: str
    comments: list[str]
    label: int | None = None

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "vision": self.vision,
            "audio": self.audio,
            "title": self.title,
            "comments": list(self.comments),
        }
        if self.label is not None:
            rec["label"] = self.label
        return rec


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    provenance: str = "unknown"
    seed: int = 0
    root: Path | None = None  # directory tensor paths are relative to

    def labeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is not None]

    def unlabeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is None]

    def resolve(self, relpath: str) -> Path:
        base = self.root if self.root is not None else Path(".")
        return (base / relpath).resolve()


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file and verify every referenced tensor file exists."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise ManifestError(f"{path}: line {lineno}: record must be a JSON object")
        for key in ("id", "vision", "audio", "title"):
            if key not in rec:
                raise ManifestError(f"{path}: line {lineno}: missing field '{key}'")
        sample_id = str(rec["id"])
        if sample_id in seen:
            raise ManifestError(
                f"{path}: duplicate id '{sample_id}' on lines {seen[sample_id]} and {lineno}"
            )
        seen[sample_id] = lineno
        comments = rec.get("comments", [])
        if not isinstance(comments, list) or not all(isinstance(c, str) for c in comments):
            raise ManifestError(f"{path}: line {lineno}: comments must be a list of strings")
        label = rec.get("label")
        if label is not None and label not in (0, 1):
            raise ManifestError(f"{path}: line {lineno}: label must be 0 or 1, got {label!r}")
        entries.append(
            ManifestEntry(
                id=sample_id,
                vision=str(rec["vision"]),
                audio=str(rec["audio"]),
                title=str(rec["title"]),
                comments=[str(c) for c in comments[:MAX_COMMENTS]],
                label=label,
            )
        )

    missing = []
    for e in entries:
        for rel in (e.vision, e.audio):
            if not (root / rel).exists():
                missing.append(f"{e.id} ({rel})")
    if missing:
        raise ManifestError(f"{path}: missing tensor files for: " + ", ".join(missing))

    provenance, seed = "unknown", 0
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        provenance = meta.get("provenance", provenance)
        seed = meta.get("seed", seed)
    return DatasetManifest(entries=entries, provenance=provenance, seed=seed, root=root)


def save_manifest(manifest: DatasetManifest, directory: str | Path, name: str = "manifest.jsonl") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(e.to_record(), ensure_ascii=False) for e in manifest.entries]
    out = directory / name
    out.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    meta = {"provenance": manifest.provenance, "seed": manifest.seed}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


def load_raw_sample(manifest: DatasetManifest, entry: ManifestEntry) -> RawSample:
    vision = container.read_tensor(manifest.resolve(entry.vision))
    audio = container.read_tensor(manifest.resolve(entry.audio))
    kwargs: dict = {}
    if audio.ndim == 1:
        kwargs["waveform"] = audio.astype(np.float32)
    else:
        kwargs["mel"] = audio.astype(np.float32)
    sample = RawSample(
        id=entry.id,
        vision=vision,
        title=entry.title,
        comments=list(entry.comments),
        label=entry.label,
        **kwargs,
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs for the planted-signal generator.

    ``rel_vision``/``rel_audio``/``rel_text`` give the probability that a
    humor-positive sample carries the planted cue in that modality.
    """

    n_unlabeled: int = 500
    n_labeled: int = 200
    rel_vision: float = 0.9
    rel_audio: float = 0.9
    rel_text: float = 0.9
    topic_dim: int = 8
    seed: int = 0
    comment_range: tuple[int, int] = (2, 4)

    frames: int = 48
    frame_size: int = 224
    mel_frames: int = 256
    mel_bins: int = 128

    def validate(self) -> None:
        if self.n_unlabeled < 0 or self.n_labeled < 0:
            raise ValueError("sample counts must be >= 0")
        for name in ("rel_vision", "rel_audio", "rel_text"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.topic_dim < 1:
            raise ValueError("topic_dim must be >= 1")
        lo, hi = self.comment_range
        if not (0 <= lo <= hi <= MAX_COMMENTS):
            raise ValueError(f"comment_range must satisfy 0 <= lo <= hi <= {MAX_COMMENTS}")


def _topic_projections(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    rng = stream(spec.seed, "lexicon")
    return {
        "text": rng.normal(size=(len(LEXICON), spec.topic_dim)),
        "vision": rng.normal(size=(16, spec.topic_dim)),
        "mel": rng.normal(size=(12, spec.topic_dim)),
    }


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _synth_vision(z: np.ndarray, rng: np.random.Generator, proj: np.ndarray,
                  frames: int, size: int) -> np.ndarray:
    """Smooth topic-dependent frame stack, uint8, background capped at 240."""
    p = np.tanh(proj @ z)
    tt = np.linspace(0.0, 1.0, frames, dtype=np.float32).reshape(frames, 1, 1)
    yy = np.linspace(0.0, 1.0, size, dtype=np.float32).reshape(1, size, 1)
    xx = np.linspace(0.0, 1.0, size, dtype=np.float32).reshape(1, 1, size)
    out = np.empty((frames, 3, size, size), dtype=np.float32)
    for c in range(3):
        base = 110.0 + 60.0 * p[c]
        gx, gy = p[3 + c], p[6 + c]
        freq = 2.0 + 2.0 * p[9 + c]
        drift = 0.5 * p[12 + c]
        phase = math.pi * p[15 - c]
        wave = np.sin(2.0 * math.pi * (freq * (gx * xx + gy * yy)) + phase + drift * tt)
        out[:, c] = base + 55.0 * (gx * xx + gy * yy) + 45.0 * wave
    # coarse luminance noise shared across channels, upsampled 4x
    grain = rng.standard_normal((frames, size // 4, size // 4), dtype=np.float32) * 6.0
    grain = grain.repeat(4, axis=1).repeat(4, axis=2)
    out += grain[:, None, :, :]
    return np.clip(out, 4.0, 240.0).astype(np.uint8)


def _plant_vision_cue(vision: np.ndarray, rng: np.random.Generator) -> None:
    size = vision.shape[-1]
    side = size // 5  # bright square motif, ~4% of the frame area
    y0 = int(rng.integers(0, size - side + 1))
    x0 = int(rng.integers(0, size - side + 1))
    vision[:, :, y0:y0 + side, x0:x0 + side] = 255


def _synth_mel(z: np.ndarray, rng: np.random.Generator, proj: np.ndarray,
               frames: int, bins: int) -> np.ndarray:
    """Topic-dependent band texture in [0, 6]; the planted cue uses 8.0."""
    p = np.tanh(proj @ z)
    t = np.arange(frames, dtype=np.float32)[:, None]
    m = np.arange(bins, dtype=np.float32)[None, :]
    mel = np.zeros((frames, bins), dtype=np.float32)
    for k in range(3):
        center = bins * (0.15 + 0.7 * (p[k] + 1.0) / 2.0)
        width = 4.0 + 8.0 * (p[3 + k] + 1.0) / 2.0
        amp = 2.0 + 1.5 * (p[6 + k] + 1.0) / 2.0
        rate = 1.0 + 3.0 * (p[9 + k] + 1.0) / 2.0
        envelope = 0.55 + 0.45 * np.sin(2.0 * math.pi * rate * t / frames + math.pi * p[9 + k])
        mel += amp * envelope * np.exp(-0.5 * ((m - center) / width) ** 2)
    mel += 0.25 * rng.standard_normal((frames, bins)).astype(np.float32)
    return np.clip(mel, 0.0, 6.0)


def _plant_mel_cue(mel: np.ndarray, rng: np.random.Generator) -> None:
    frames, bins = mel.shape
    span = min(64, frames)
    t0 = int(rng.integers(0, frames - span + 1))
    b0 = int(rng.integers(0, bins - 8 + 1))
    mel[t0:t0 + span, b0:b0 + 8] = 8.0


def _synth_text(z: np.ndarray, rng: np.random.Generator, proj: np.ndarray,
                comment_range: tuple[int, int]) -> tuple[str, list[str]]:
    probs = _softmax(0.8 * (proj @ z))
    idx = rng.choice(len(LEXICON), size=int(rng.integers(4, 8)), p=probs)
    title = " ".join(LEXICON[i] for i in idx)
    n_comments = int(rng.integers(comment_range[0], comment_range[1] + 1))
    comments = []
    for _ in range(n_comments):
        idx = rng.choice(len(LEXICON), size=int(rng.integers(3, 9)), p=probs)
        comments.append(" ".join(LEXICON[i] for i in idx))
    return title, comments


def _plant_text_cue(comments: list[str], rng: np.random.Generator) -> None:
    if not comments:
        comments.append(MARKER_WORD)
        return
    i = int(rng.integers(0, len(comments)))
    words = comments[i].split()
    words.insert(int(rng.integers(0, len(words) + 1)), MARKER_WORD)
    comments[i] = " ".join(words)


@dataclass
class SamplePlan:
    """Everything about a synthetic sample except the heavy tensors."""

    id: str
    index: int
    cue_class: int  # 0/1; emitted as the label only for the labeled block
    labeled: bool
    topic: np.ndarray
    title: str
    comments: list[str]
    cue_vision: bool
    cue_audio: bool
    cue_text: bool

    @property
    def label(self) -> int | None:
        return self.cue_class if self.labeled else None


def sample_plan(spec: SyntheticSpec, idx: int, proj: dict[str, np.ndarray] | None = None) -> SamplePlan:
    """Plan one sample (pure in (spec, idx)); tensors are synthesized later.

    Each modality draws from its own named sub-stream, so text statistics
    can be reproduced without touching the tensor streams. Unlabeled samples
    (indices below ``n_unlabeled``) draw a hidden balanced class and plant
    the same cues, but withhold the label.
    """
    proj = proj or _topic_projections(spec)
    unlabeled = idx < spec.n_unlabeled
    block_idx = idx if unlabeled else idx - spec.n_unlabeled
    cue_class = block_idx % 2
    sample_id = f"syn-{idx:05d}"

    topic = stream(spec.seed, "synth", sample_id, "topic").normal(size=spec.topic_dim)
    gates = stream(spec.seed, "synth", sample_id, "cues").random(3)
    cue_v, cue_a, cue_t = (
        bool(cue_class) and bool(gates[0] < spec.rel_vision),
        bool(cue_class) and bool(gates[1] < spec.rel_audio),
        bool(cue_class) and bool(gates[2] < spec.rel_text),
    )
    text_rng = stream(spec.seed, "synth", sample_id, "text")
    title, comments = _synth_text(topic, text_rng, proj["text"], spec.comment_range)
    if cue_t:
        _plant_text_cue(comments, text_rng)
    return SamplePlan(
        id=sample_id, index=idx, cue_class=cue_class, labeled=not unlabeled,
        topic=topic, title=title, comments=comments,
        cue_vision=cue_v, cue_audio=cue_a, cue_text=cue_t,
    )


def synthesize_vision(spec: SyntheticSpec, plan: SamplePlan,
                      proj: dict[str, np.ndarray]) -> np.ndarray:
    rng = stream(spec.seed, "synth", plan.id, "vision")
    vision = _synth_vision(plan.topic, rng, proj["vision"], spec.frames, spec.frame_size)
    if plan.cue_vision:
        _plant_vision_cue(vision, rng)
    return vision


def synthesize_mel(spec: SyntheticSpec, plan: SamplePlan,
                   proj: dict[str, np.ndarray]) -> np.ndarray:
    rng = stream(spec.seed, "synth", plan.id, "audio")
    mel = _synth_mel(plan.topic, rng, proj["mel"], spec.mel_frames, spec.mel_bins)
    if plan.cue_audio:
        _plant_mel_cue(mel, rng)
    return mel


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write a deterministic synthetic corpus under ``out_dir``.

    Unlabeled samples come first, then the labeled block with exactly
    balanced classes (difference at most one for an odd count). Every sample
    is a pure function of (spec, seed, sample index).
    """
    spec.validate()
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    proj = _topic_projections(spec)

    entries: list[ManifestEntry] = []
    for idx in range(spec.n_unlabeled + spec.n_labeled):
        plan = sample_plan(spec, idx, proj)
        vision_rel = f"tensors/{plan.id}.vision.cvt"
        audio_rel = f"tensors/{plan.id}.mel.cvt"
        container.write_tensor(out_dir / vision_rel, synthesize_vision(spec, plan, proj))
        container.write_tensor(out_dir / audio_rel, synthesize_mel(spec, plan, proj))
        entries.append(
            ManifestEntry(
                id=plan.id,
                vision=vision_rel,
                audio=audio_rel,
                title=plan.title,
                comments=plan.comments,
                label=plan.label,
            )
        )

    manifest = DatasetManifest(
        entries=entries,
        provenance=f"synthetic(n_unlabeled={spec.n_unlabeled}, n_labeled={spec.n_labeled})",
        seed=spec.seed,
        root=out_dir,
    )
    save_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# label-balanced splitting
# ---------------------------------------------------------------------------

def split_labeled(
    manifest: DatasetManifest,
    sizes: tuple[int, int, int],
    seed: int,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Split the labeled pool into train/dev/test with per-split class balance.

    Splits are disjoint, deterministic in ``seed``, and each split's class
    counts differ by at most one (odd sizes give the extra slot to whichever
    class has more samples left).
    """
    labeled = manifest.labeled()
    if sum(sizes) > len(labeled):
        raise ValueError(
            f"requested {sum(sizes)} labeled samples but the pool has {len(labeled)}"
        )
    pools = {c: [e for e in labeled if e.label == c] for c in (0, 1)}
    for c in (0, 1):
        order = stream(seed, "split", c).permutation(len(pools[c]))
        pools[c] = [pools[c][i] for i in order]

    names = ("train", "dev", "test")
    out = []
    cursor = {0: 0, 1: 0}
    for name, size in zip(names, sizes):
        take = {0: size // 2, 1: size // 2}
        if size % 2:
            left0 = len(pools[0]) - cursor[0] - take[0]
            left1 = len(pools[1]) - cursor[1] - take[1]
            take[0 if left0 >= left1 else 1] += 1
        picked = []
        for c in (0, 1):
            if cursor[c] + take[c] > len(pools[c]):
                raise ValueError(
                    f"class {c} pool exhausted while building the {name} split "
                    f"(need {take[c]}, have {len(pools[c]) - cursor[c]})"
                )
            picked.extend(pools[c][cursor[c]:cursor[c] + take[c]])
            cursor[c] += take[c]
        picked.sort(key=lambda e: e.id)
        out.append(
            DatasetManifest(
                entries=picked,
                provenance=f"{manifest.provenance}/{name}",
                seed=seed,
                root=manifest.root,
            )
        )
    return out[0], out[1], out[2]
