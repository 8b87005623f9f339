"""Contrastive pre-training losses over the six pooled views per sample.

Two anchored terms per perspective: a noise-contrastive ratio whose
denominator pools the anchor's own pair score with all cross-sample
candidate scores (three families, batch minus one each), and a normalized
term whose denominator sweeps the whole batch including the matching index.
Both are computed with max-subtracted log-sum-exp; a scalar-loop reference
implementation transcribes the definitions directly for cross-checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class ContrastiveViews:
    """Pooled vectors per sample: original and alternate view of each branch.

    ``fused_alt_video`` fuses the alternate (augmented) video view with the
    first language view; ``fused_alt_lang`` fuses the original video view
    with the second language view. Each field is (B, d).
    """

    video: torch.Tensor
    video_alt: torch.Tensor
    lang: torch.Tensor
    lang_alt: torch.Tensor
    fused_alt_video: torch.Tensor
    fused_alt_lang: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(getattr(self, f).shape) for f in self.field_names()}
        if len(shapes) != 1 or any(len(s) != 2 for s in shapes):
            raise ValueError(f"all views must share one (B, d) shape, got {shapes}")

    @staticmethod
    def field_names() -> tuple[str, ...]:
        return ("video", "video_alt", "lang", "lang_alt", "fused_alt_video", "fused_alt_lang")

    @property
    def batch_size(self) -> int:
        return self.video.shape[0]

    def permuted(self, order) -> "ContrastiveViews":
        idx = torch.as_tensor(order, dtype=torch.int64)
        return ContrastiveViews(**{f: getattr(self, f)[idx] for f in self.field_names()})

    def video_anchor_candidates(self) -> tuple[torch.Tensor, ...]:
        return (self.lang, self.lang_alt, self.fused_alt_video)

    def lang_anchor_candidates(self) -> tuple[torch.Tensor, ...]:
        return (self.video, self.video_alt, self.fused_alt_lang)


@dataclass
class LossBreakdown:
    video_nce: torch.Tensor
    video_norm: torch.Tensor
    lang_nce: torch.Tensor
    lang_norm: torch.Tensor
    per_sample: torch.Tensor  # (B,) summed contributions

    @property
    def video_total(self) -> torch.Tensor:
        return self.video_nce + self.video_norm

    @property
    def lang_total(self) -> torch.Tensor:
        return self.lang_nce + self.lang_norm

    @property
    def total(self) -> torch.Tensor:
        return self.video_total + self.lang_total


def log_affinity(p: torch.Tensor, q: torch.Tensor, temperature) -> torch.Tensor:
    """Dot-product similarity divided by the temperature."""
    temperature = torch.as_tensor(temperature, dtype=p.dtype, device=p.device)
    return (p * q).sum(dim=-1) / temperature


def affinity(p: torch.Tensor, q: torch.Tensor, temperature) -> torch.Tensor:
    """exp(sim/temperature); losses stay in log space and never call this."""
    return log_affinity(p, q, temperature).exp()


def nce_log_ratio(pos_score: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """log( e^pos / (e^pos + sum e^neg) ), stable; always <= 0."""
    if neg_scores.numel() == 0:
        raise ValueError("need at least one negative score (batch size >= 2)")
    pool = torch.cat([pos_score.reshape(1), neg_scores.reshape(-1)])
    return pos_score - torch.logsumexp(pool, dim=0)


def _maybe_normalize(views: ContrastiveViews, normalize: bool) -> ContrastiveViews:
    if not normalize:
        return views
    fields = {
        f: torch.nn.functional.normalize(getattr(views, f), dim=-1)
        for f in views.field_names()
    }
    return ContrastiveViews(**fields)


def _perspective_terms(anchors: torch.Tensor, candidates: tuple[torch.Tensor, ...],
                       temperature) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Anchored NCE sum, normalized-ratio sum, and per-sample totals."""
    batch = anchors.shape[0]
    if batch < 2:
        raise ValueError("contrastive losses need batch size >= 2")
    temperature = torch.as_tensor(temperature, dtype=anchors.dtype, device=anchors.device)
    stacked = torch.stack(candidates)  # (3, B, d)

    # s[f, i, j] = anchor_i . candidate_f_j / temperature
    scores = torch.einsum("id,fjd->fij", anchors, stacked) / temperature
    eye = torch.eye(batch, dtype=torch.bool, device=anchors.device)
    diag = scores[:, eye]  # (3, B)
    # negatives per anchor i: every family's j != i column, 3*(B-1) values
    negatives = scores.masked_select(~eye).view(len(candidates), batch, batch - 1)
    negatives = negatives.permute(1, 0, 2).reshape(batch, -1)  # (B, 3(B-1))
    pooled = torch.cat([diag.permute(1, 0).unsqueeze(-1), negatives.unsqueeze(1).expand(-1, len(candidates), -1)], dim=-1)
    nce_terms = diag.permute(1, 0) - torch.logsumexp(pooled, dim=-1)  # (B, 3)

    # normalized term: candidate_f_i against anchors over the whole batch
    rev = torch.einsum("fid,jd->fij", stacked, anchors) / temperature
    norm_terms = rev[:, eye].permute(1, 0) - torch.logsumexp(rev, dim=-1).permute(1, 0)

    nce_per_sample = -nce_terms.sum(dim=1)
    norm_per_sample = -norm_terms.sum(dim=1)
    return nce_per_sample.sum(), norm_per_sample.sum(), nce_per_sample + norm_per_sample


def video_perspective_loss(views: ContrastiveViews, temperature,
                           normalize: bool = False):
    """Video-anchored alignment: pull language and fused views to the video."""
    views = _maybe_normalize(views, normalize)
    return _perspective_terms(views.video, views.video_anchor_candidates(), temperature)


def language_perspective_loss(views: ContrastiveViews, temperature,
                              normalize: bool = False):
    """Language-anchored mirror of the video perspective."""
    views = _maybe_normalize(views, normalize)
    return _perspective_terms(views.lang, views.lang_anchor_candidates(), temperature)


def pretrain_loss(views: ContrastiveViews, temperature,
                  normalize: bool = False) -> LossBreakdown:
    """Both perspectives combined; weight regularization is the trainer's job."""
    v_nce, v_norm, v_per = video_perspective_loss(views, temperature, normalize)
    l_nce, l_norm, l_per = language_perspective_loss(views, temperature, normalize)
    return LossBreakdown(
        video_nce=v_nce, video_norm=v_norm,
        lang_nce=l_nce, lang_norm=l_norm,
        per_sample=v_per + l_per,
    )


# ---------------------------------------------------------------------------
# scalar-loop reference (independent oracle for the vectorized path)
# ---------------------------------------------------------------------------

def pretrain_loss_reference(views: ContrastiveViews, temperature,
                            normalize: bool = False) -> LossBreakdown:
    """Direct transcription with python floats and explicit loops; B <= 32."""
    batch = views.batch_size
    if batch < 2:
        raise ValueError("contrastive losses need batch size >= 2")
    if batch > 32:
        raise ValueError("reference path is for small batches (B <= 32)")
    temp = float(torch.as_tensor(temperature).detach())

    def rows(t: torch.Tensor) -> list[list[float]]:
        data = [[float(x) for x in row] for row in t.detach().to(torch.float64)]
        if normalize:
            data = [
                [x / math.sqrt(sum(v * v for v in row)) for x in row] if any(row) else row
                for row in data
            ]
        return data

    def f(p: list[float], q: list[float]) -> float:
        return math.exp(sum(a * b for a, b in zip(p, q)) / temp)

    def perspective(anchors, fams):
        nce_sum, norm_sum = 0.0, 0.0
        per_sample = [0.0] * batch
        for i in range(batch):
            z = 0.0
            for j in range(batch):
                if j == i:
                    continue
                for fam in fams:
                    z += f(anchors[i], fam[j])
            contrib = 0.0
            for fam in fams:
                pos = f(anchors[i], fam[i])
                contrib += math.log(pos / (pos + z))
            nce_sum -= contrib
            per_sample[i] -= contrib
            contrib = 0.0
            for fam in fams:
                denom = 0.0
                for j in range(batch):
                    denom += f(fam[i], anchors[j])
                contrib += math.log(f(fam[i], anchors[i]) / denom)
            norm_sum -= contrib
            per_sample[i] -= contrib
        return nce_sum, norm_sum, per_sample

    video = rows(views.video)
    video_alt = rows(views.video_alt)
    lang = rows(views.lang)
    lang_alt = rows(views.lang_alt)
    fused_av = rows(views.fused_alt_video)
    fused_al = rows(views.fused_alt_lang)

    v_nce, v_norm, v_per = perspective(video, (lang, lang_alt, fused_av))
    l_nce, l_norm, l_per = perspective(lang, (video, video_alt, fused_al))
    dtype = views.video.dtype
    return LossBreakdown(
        video_nce=torch.tensor(v_nce, dtype=dtype),
        video_norm=torch.tensor(v_norm, dtype=dtype),
        lang_nce=torch.tensor(l_nce, dtype=dtype),
        lang_norm=torch.tensor(l_norm, dtype=dtype),
        per_sample=torch.tensor([a + b for a, b in zip(v_per, l_per)], dtype=dtype),
    )
