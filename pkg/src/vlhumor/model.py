"""Patch embedding, the two branch encoders, multimodal fusion, classifier.

The video branch concatenates a leading [CLS], the vision tubelet
embeddings, a second [CLS] and the audio patch embeddings, and runs them
through a self-attention encoder; the language branch flattens title and
comments into one [CLS]/[SEP]-delimited document. Fusion concatenates both
branch sequences and pools the first token. Encoders are pre-norm
transformer stacks without a final norm, so a block whose output
projections are zero is an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .signal_prep import Modalities, ProcessedSample


@dataclass
class ModelConfig:
    dim: int = 512
    heads: int = 12
    layers: int = 8
    dropout: float = 0.1
    vision_patch: tuple[int, int, int] = (6, 32, 32)  # (frames, height, width)
    audio_patch: tuple[int, int] = (16, 16)  # (time, mel)
    frames: int = 48
    frame_size: int = 224
    mel_bins: int = 128
    max_mel_frames: int = 256
    max_sentence_tokens: int = 16
    max_comments: int = 10
    vocab_size: int = 0  # 0 means "take it from the prepared corpus"
    classifier_hidden: int = 512
    ffn_mult: int = 4
    fusion_mode: str = "sequence"  # "pooled" fuses only the two branch vectors
    temperature_init: float = 0.07

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        pt, ph, pw = self.vision_patch
        if self.frames % pt or self.frame_size % ph or self.frame_size % pw:
            raise ValueError(
                f"vision patch {self.vision_patch} does not divide "
                f"({self.frames}, {self.frame_size}, {self.frame_size})"
            )
        at, am = self.audio_patch
        if self.mel_bins % am or self.max_mel_frames % at:
            raise ValueError(
                f"audio patch {self.audio_patch} does not divide ({self.max_mel_frames}, {self.mel_bins})"
            )
        if self.fusion_mode not in ("sequence", "pooled"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")

    @property
    def vision_rows(self) -> int:
        pt, ph, pw = self.vision_patch
        return (self.frames // pt) * (self.frame_size // ph) * (self.frame_size // pw)

    def audio_rows(self, mel_frames: int) -> int:
        at, am = self.audio_patch
        if mel_frames % at:
            raise ValueError(f"mel frame count {mel_frames} not divisible by {at}")
        return (mel_frames // at) * (self.mel_bins // am)

    @property
    def max_audio_rows(self) -> int:
        return self.audio_rows(self.max_mel_frames)

    @property
    def max_doc_len(self) -> int:
        # [CLS] title [SEP] comments... [SEP]
        return 1 + self.max_sentence_tokens + 1 + self.max_comments * self.max_sentence_tokens + 1


# ---------------------------------------------------------------------------
# sequence-length bookkeeping
# ---------------------------------------------------------------------------

def video_seq_len(cfg: ModelConfig, mask: Modalities, mel_frames: int | None = None) -> int:
    """[CLS]+vision and/or [CLS]+audio block lengths for the video encoder."""
    if not mask.video_branch():
        raise ValueError("video branch needs vision or audio")
    total = 0
    if mask.vision:
        total += 1 + cfg.vision_rows
    if mask.audio:
        total += 1 + cfg.audio_rows(cfg.max_mel_frames if mel_frames is None else mel_frames)
    return total


def language_seq_len(title_len: int, comment_lens: list[int], mask: Modalities) -> int:
    """[CLS] + title+[SEP] (if any) + concatenated comments+[SEP] (if any)."""
    if not mask.language_branch():
        raise ValueError("language branch needs title or comments")
    total = 1
    if mask.title and title_len:
        total += title_len + 1
    if mask.comments and comment_lens:
        total += sum(comment_lens) + 1
    return total


def fused_seq_len(cfg: ModelConfig, mask: Modalities, title_len: int = 0,
                  comment_lens: list[int] | None = None, mel_frames: int | None = None) -> int:
    total = 0
    if mask.video_branch():
        total += video_seq_len(cfg, mask, mel_frames)
    if mask.language_branch():
        total += language_seq_len(title_len, comment_lens or [], mask)
    if total == 0:
        raise ValueError("empty modality mask")
    return total


def fused_block_bounds(cfg: ModelConfig, mask: Modalities) -> dict[str, tuple[int, int]]:
    """Canonical (start, end) of the V, A, T, C regions in the fused sequence."""
    bounds: dict[str, tuple[int, int]] = {}
    cursor = 0
    if mask.vision:
        bounds["V"] = (cursor, cursor + 1 + cfg.vision_rows)
        cursor += 1 + cfg.vision_rows
    if mask.audio:
        bounds["A"] = (cursor, cursor + 1 + cfg.max_audio_rows)
        cursor += 1 + cfg.max_audio_rows
    if mask.language_branch():
        cursor += 1  # language [CLS] belongs to the first language region
        t_start = cursor - 1
        if mask.title:
            bounds["T"] = (t_start, cursor + cfg.max_sentence_tokens + 1)
            cursor += cfg.max_sentence_tokens + 1
            t_start = cursor
        if mask.comments:
            bounds["C"] = (t_start, cursor + cfg.max_comments * cfg.max_sentence_tokens + 1)
    return bounds


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class LanguageBatch:
    ids: torch.Tensor  # (B, L) int64, PAD-padded
    positions: torch.Tensor  # (B, L) int64 canonical slot per token
    key_mask: torch.Tensor  # (B, L) bool, True = real token

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]


@dataclass
class CollatedBatch:
    ids: list[str]
    vision: torch.Tensor | None  # (B, 48, 3, 224, 224)
    mel: torch.Tensor | None  # (B, T, 128)
    mel_row_mask: torch.Tensor | None  # (B, audio_rows) bool
    lang: LanguageBatch | None
    labels: torch.Tensor | None  # (B,) int64 where known

    @property
    def batch_size(self) -> int:
        return len(self.ids)


def _document_ids(sample: ProcessedSample, cfg: ModelConfig, mask: Modalities,
                  canonical: bool) -> tuple[list[int], list[int]]:
    """Token ids and slot positions for one language document.

    Position ids are fixed addresses in the maximal [CLS] title [SEP]
    comments [SEP] layout, so a token keeps its position embedding whether
    or not other blocks are present. ``canonical`` additionally keeps every
    block at its full slot span (PAD-filled, attention-masked), which gives
    all samples an identical cell layout for attention averaging.
    """
    pad, cls, sep = 0, 1, 2
    s = cfg.max_sentence_tokens
    title = list(sample.title_tokens)[:s] if mask.title else []
    comments = [list(c)[:s] for c in sample.comment_tokens[: cfg.max_comments]] if mask.comments else []
    ids = [cls]
    pos = [0]
    title_sep_slot = 1 + s
    comment_base = title_sep_slot + 1
    final_sep_slot = comment_base + cfg.max_comments * s
    if canonical:
        if mask.title:
            ids.extend(title + [pad] * (s - len(title)) + [sep])
            pos.extend(range(1, title_sep_slot + 1))
        if mask.comments:
            for j in range(cfg.max_comments):
                toks = comments[j] if j < len(comments) else []
                ids.extend(toks + [pad] * (s - len(toks)))
                pos.extend(range(comment_base + j * s, comment_base + (j + 1) * s))
            ids.append(sep)
            pos.append(final_sep_slot)
        return ids, pos
    if title:
        ids.extend(title + [sep])
        pos.extend(range(1, 1 + len(title)))
        pos.append(title_sep_slot)
    if comments:
        for j, toks in enumerate(comments):
            ids.extend(toks)
            pos.extend(range(comment_base + j * s, comment_base + j * s + len(toks)))
        ids.append(sep)
        pos.append(final_sep_slot)
    if len(ids) == 1:
        raise ValueError(f"{sample.id}: no language content under mask {mask.label()}")
    return ids, pos


def build_language_batch(samples: list[ProcessedSample], cfg: ModelConfig,
                         mask: Modalities, canonical: bool = False) -> LanguageBatch:
    docs = [_document_ids(s, cfg, mask, canonical) for s in samples]
    real_lens = []
    for (ids, _), s in zip(docs, samples):
        title = s.title_tokens if mask.title else []
        comments = s.comment_tokens if mask.comments else []
        real_lens.append(language_seq_len(len(title), [len(c) for c in comments], mask))
    longest = max(len(ids) for ids, _ in docs)
    out_ids = torch.zeros(len(docs), longest, dtype=torch.int64)
    out_pos = torch.zeros(len(docs), longest, dtype=torch.int64)
    out_mask = torch.zeros(len(docs), longest, dtype=torch.bool)
    for i, (ids, pos) in enumerate(docs):
        n = len(ids)
        out_ids[i, :n] = torch.tensor(ids, dtype=torch.int64)
        out_pos[i, :n] = torch.tensor(pos, dtype=torch.int64)
        if canonical:
            out_mask[i, :n] = torch.tensor(ids, dtype=torch.int64) != 0
            out_mask[i, 0] = True
        else:
            out_mask[i, :n] = True
    return LanguageBatch(ids=out_ids, positions=out_pos, key_mask=out_mask)


def collate(samples: list[ProcessedSample], cfg: ModelConfig, mask: Modalities,
            canonical_language: bool = False, dtype: torch.dtype = torch.float32) -> CollatedBatch:
    """Stack processed samples into model input tensors under a modality mask."""
    vision = mel = mel_row_mask = lang = labels = None
    if mask.vision:
        vision = torch.from_numpy(np.stack([s.vision for s in samples])).to(dtype)
    if mask.audio:
        at = cfg.audio_patch[0]
        longest = max(s.mel.shape[0] for s in samples)
        if longest > cfg.max_mel_frames:
            raise ValueError(
                f"mel frame count {longest} exceeds max_mel_frames {cfg.max_mel_frames}"
            )
        mel_t = torch.zeros(len(samples), longest, cfg.mel_bins, dtype=dtype)
        mel_row_mask = torch.zeros(len(samples), cfg.audio_rows(longest), dtype=torch.bool)
        rows_per_step = cfg.mel_bins // cfg.audio_patch[1]
        for i, s in enumerate(samples):
            t = s.mel.shape[0]
            mel_t[i, :t] = torch.from_numpy(s.mel).to(dtype)
            mel_row_mask[i, : (t // at) * rows_per_step] = True
        mel = mel_t
    if mask.language_branch():
        lang = build_language_batch(samples, cfg, mask, canonical=canonical_language)
    if all(s.label is not None for s in samples):
        labels = torch.tensor([s.label for s in samples], dtype=torch.int64)
    return CollatedBatch(
        ids=[s.id for s in samples], vision=vision, mel=mel,
        mel_row_mask=mel_row_mask, lang=lang, labels=labels,
    )


# ---------------------------------------------------------------------------
# encoder stack
# ---------------------------------------------------------------------------

class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.norm_attn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_mult * dim)
        self.ffn_out = nn.Linear(ffn_mult * dim, dim)
        self.drop = nn.Dropout(dropout)

    def _attention(self, x: torch.Tensor, key_mask: torch.Tensor | None,
                   collect: bool) -> tuple[torch.Tensor, torch.Tensor | None]:
        b, length, dim = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, length, self.heads, dim // self.heads).transpose(1, 2)
        k = k.view(b, length, self.heads, dim // self.heads).transpose(1, 2)
        v = v.view(b, length, self.heads, dim // self.heads).transpose(1, 2)
        weights = None
        if collect:
            scores = q @ k.transpose(-1, -2) / math.sqrt(dim // self.heads)
            if key_mask is not None:
                scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
            weights = scores.softmax(dim=-1)
            attended = weights @ v
        else:
            attn_mask = None
            if key_mask is not None:
                attn_mask = key_mask[:, None, None, :]
            attended = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        attended = attended.transpose(1, 2).reshape(b, length, dim)
        return self.proj(attended), weights

    def forward(self, x, key_mask=None, collect=False):
        attended, weights = self._attention(self.norm_attn(x), key_mask, collect)
        x = x + self.drop(attended)
        h = self.ffn_out(F.gelu(self.ffn_in(self.norm_ffn(x))))
        x = x + self.drop(h)
        return x, weights


class Encoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, dropout: float, ffn_mult: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderLayer(dim, heads, dropout, ffn_mult) for _ in range(layers)
        )

    def forward(self, x, key_mask=None, collect=False):
        collected = [] if collect else None
        for block in self.blocks:
            x, weights = block(x, key_mask, collect)
            if collect:
                collected.append(weights)
        return x, collected


@dataclass
class BranchOutput:
    """Encoder token sequence plus its pooled leading-token vector."""

    sequence: torch.Tensor  # (B, S, d)
    pooled: torch.Tensor  # (B, d), always row 0 of the sequence
    key_mask: torch.Tensor  # (B, S) bool

    @classmethod
    def from_sequence(cls, sequence: torch.Tensor, key_mask: torch.Tensor) -> "BranchOutput":
        return cls(sequence=sequence, pooled=sequence[:, 0], key_mask=key_mask)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class TwoBranchModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size <= 0:
            raise ValueError("vocab_size must be resolved before building the model")
        config.validate()
        self.config = config
        d = config.dim
        pt, ph, pw = config.vision_patch
        at, am = config.audio_patch

        self.vision_proj = nn.Linear(pt * 3 * ph * pw, d)
        self.vision_pos = nn.Parameter(torch.zeros(config.vision_rows, d))
        self.audio_proj = nn.Linear(at * am, d)
        self.audio_pos = nn.Parameter(torch.zeros(config.max_audio_rows, d))
        self.vision_cls = nn.Parameter(torch.zeros(d))
        self.audio_cls = nn.Parameter(torch.zeros(d))
        self.word_emb = nn.Embedding(config.vocab_size, d, padding_idx=0)
        self.text_pos = nn.Parameter(torch.zeros(config.max_doc_len, d))
        self.embed_drop = nn.Dropout(config.dropout)

        self.video_encoder = Encoder(d, config.heads, config.layers, config.dropout, config.ffn_mult)
        self.language_encoder = Encoder(d, config.heads, config.layers, config.dropout, config.ffn_mult)
        self.fusion_encoder = Encoder(d, config.heads, config.layers, config.dropout, config.ffn_mult)

        self.classifier_hidden = nn.Linear(d, config.classifier_hidden)
        self.classifier_out = nn.Linear(config.classifier_hidden, 2)
        self.log_temp = nn.Parameter(torch.tensor(math.log(config.temperature_init)))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        std = 0.02
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
                with torch.no_grad():
                    module.weight[module.padding_idx].zero_()
        for table in (self.vision_pos, self.audio_pos, self.vision_cls, self.audio_cls, self.text_pos):
            nn.init.trunc_normal_(table, std=std, a=-2 * std, b=2 * std)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temp.exp()

    # -- embeddings --------------------------------------------------------

    def embed_vision(self, vision: torch.Tensor, add_positions: bool = True) -> torch.Tensor:
        cfg = self.config
        expected = (cfg.frames, 3, cfg.frame_size, cfg.frame_size)
        if tuple(vision.shape[1:]) != expected:
            raise ValueError(f"vision shape {tuple(vision.shape[1:])} != {expected}")
        pt, ph, pw = cfg.vision_patch
        patches = rearrange(
            vision, "b (f pt) c (h ph) (w pw) -> b (f h w) (pt c ph pw)", pt=pt, ph=ph, pw=pw
        )
        out = self.vision_proj(patches)
        if add_positions:
            out = out + self.vision_pos
        return out

    def embed_audio(self, mel: torch.Tensor, add_positions: bool = True) -> torch.Tensor:
        cfg = self.config
        at, am = cfg.audio_patch
        if mel.shape[-1] != cfg.mel_bins:
            raise ValueError(f"mel bins {mel.shape[-1]} != {cfg.mel_bins}")
        if mel.shape[1] % at:
            raise ValueError(f"mel frame count {mel.shape[1]} not divisible by {at}")
        patches = rearrange(mel, "b (t pt) (m pm) -> b (t m) (pt pm)", pt=at, pm=am)
        out = self.audio_proj(patches)
        if add_positions:
            out = out + self.audio_pos[: out.shape[1]]
        return out

    # -- branches -----------------------------------------------------------

    def encode_video(self, vision: torch.Tensor | None, mel: torch.Tensor | None,
                     mel_row_mask: torch.Tensor | None = None,
                     collect: bool = False) -> BranchOutput:
        if vision is None and mel is None:
            raise ValueError("video branch needs at least one of vision or audio")
        parts, masks = [], []
        batch = (vision if vision is not None else mel).shape[0]
        dtype = (vision if vision is not None else mel).dtype
        device = (vision if vision is not None else mel).device
        if vision is not None:
            ev = self.embed_vision(vision)
            cls = self.vision_cls.to(dtype).expand(batch, 1, -1)
            parts += [cls, ev]
            masks.append(torch.ones(batch, 1 + ev.shape[1], dtype=torch.bool, device=device))
        if mel is not None:
            ea = self.embed_audio(mel)
            cls = self.audio_cls.to(dtype).expand(batch, 1, -1)
            parts += [cls, ea]
            rows = (
                mel_row_mask
                if mel_row_mask is not None
                else torch.ones(batch, ea.shape[1], dtype=torch.bool, device=device)
            )
            masks.append(torch.cat(
                [torch.ones(batch, 1, dtype=torch.bool, device=device), rows], dim=1
            ))
        x = self.embed_drop(torch.cat(parts, dim=1))
        key_mask = torch.cat(masks, dim=1)
        out, weights = self.video_encoder(x, key_mask, collect)
        result = BranchOutput.from_sequence(out, key_mask)
        return (result, weights) if collect else result

    def encode_language(self, lang: LanguageBatch, collect: bool = False) -> BranchOutput:
        x = self.word_emb(lang.ids) + self.text_pos[lang.positions]
        x = self.embed_drop(x)
        out, weights = self.language_encoder(x, lang.key_mask, collect)
        result = BranchOutput.from_sequence(out, lang.key_mask)
        return (result, weights) if collect else result

    def fuse(self, video: BranchOutput, lang: BranchOutput, collect: bool = False) -> BranchOutput:
        if video.sequence.shape[1] == 0 or lang.sequence.shape[1] == 0:
            raise ValueError("fusion needs non-empty video and language sequences")
        x = torch.cat([video.sequence, lang.sequence], dim=1)
        key_mask = torch.cat([video.key_mask, lang.key_mask], dim=1)
        out, weights = self.fusion_encoder(x, key_mask, collect)
        result = BranchOutput.from_sequence(out, key_mask)
        return (result, weights) if collect else result

    def _fuse_available(self, video: BranchOutput | None, lang: BranchOutput | None,
                        collect: bool = False):
        """Fusion for any mask: both branches, or a single branch alone."""
        if video is not None and lang is not None:
            if self.config.fusion_mode == "pooled":
                x = torch.stack([video.pooled, lang.pooled], dim=1)
                mask = torch.ones(x.shape[0], 2, dtype=torch.bool, device=x.device)
            else:
                return self.fuse(video, lang, collect)
        elif video is not None:
            x, mask = video.sequence, video.key_mask
        elif lang is not None:
            x, mask = lang.sequence, lang.key_mask
        else:
            raise ValueError("nothing to fuse: both branches empty")
        out, weights = self.fusion_encoder(x, mask, collect)
        result = BranchOutput.from_sequence(out, mask)
        return (result, weights) if collect else result

    # -- heads ---------------------------------------------------------------

    def classify_logits(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.classifier_out(F.gelu(self.classifier_hidden(pooled)))

    def classify(self, pooled: torch.Tensor) -> torch.Tensor:
        """Two-way probabilities from the fused pooled vector."""
        return self.classify_logits(pooled).softmax(dim=-1)

    # -- pipelines -----------------------------------------------------------

    def encode_batch(self, batch: CollatedBatch, mask: Modalities,
                     collect: bool = False):
        video = lang = None
        if mask.video_branch():
            video = self.encode_video(batch.vision, batch.mel, batch.mel_row_mask)
        if mask.language_branch():
            if batch.lang is None:
                raise ValueError("batch has no language tensors but the mask requests them")
            lang = self.encode_language(batch.lang)
        return self._fuse_available(video, lang, collect)

    def forward(self, batch: CollatedBatch, mask: Modalities) -> torch.Tensor:
        fused = self.encode_batch(batch, mask)
        return self.classify_logits(fused.pooled)

    def pretrain_views(self, original: CollatedBatch, augmented: CollatedBatch,
                       mask: Modalities):
        """The six pooled vectors per sample entering the contrastive losses."""
        from .augment import language_views
        from .objective import ContrastiveViews

        if not mask.video_branch() or not mask.language_branch():
            raise ValueError(
                "contrastive pre-training needs both branches; "
                f"mask {mask.label()} leaves one empty"
            )
        video = self.encode_video(original.vision, original.mel, original.mel_row_mask)
        video_alt = self.encode_video(augmented.vision, augmented.mel, augmented.mel_row_mask)
        lang, lang_alt = language_views(original.lang, self)
        if self.config.fusion_mode == "pooled":
            fused_alt_video = self._fuse_pooled(video_alt.pooled, lang.pooled)
            fused_alt_lang = self._fuse_pooled(video.pooled, lang_alt.pooled)
        else:
            fused_alt_video = self.fuse(video_alt, lang).pooled
            fused_alt_lang = self.fuse(video, lang_alt).pooled
        return ContrastiveViews(
            video=video.pooled,
            video_alt=video_alt.pooled,
            lang=lang.pooled,
            lang_alt=lang_alt.pooled,
            fused_alt_video=fused_alt_video,
            fused_alt_lang=fused_alt_lang,
        )

    def _fuse_pooled(self, video_vec: torch.Tensor, lang_vec: torch.Tensor) -> torch.Tensor:
        x = torch.stack([video_vec, lang_vec], dim=1)
        mask = torch.ones(x.shape[0], 2, dtype=torch.bool, device=x.device)
        out, _ = self.fusion_encoder(x, mask, False)
        return out[:, 0]
