"""Stochastic views for contrastive pre-training.

Vision gets a menu of six ops (erase, color jitter, 2-D affine, color drop,
gaussian blur, gaussian noise), each firing independently with probability
1/3 by default; the mel grid gets rectangle masking covering 10-20% of its
cells; language views come from two dropout passes over identical tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

VISUAL_OPS = ("erase", "color_jitter", "affine", "color_drop", "gaussian_blur", "gaussian_noise")


@dataclass
class AugmentPolicy:
    apply_prob: float = 1.0 / 3.0
    erase_area: tuple[float, float] = (0.10, 0.20)
    mel_mask: tuple[float, float] = (0.10, 0.20)
    mode: str = "independent"  # or "choose_three": pick 3 ops, then gate each
    jitter: float = 0.2
    max_rotate_deg: float = 10.0
    max_translate: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError(f"apply_prob must be in [0, 1], got {self.apply_prob}")
        for name in ("erase_area", "mel_mask"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi < 1.0:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})")
        if self.mode not in ("independent", "choose_three"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def draw_op_gates(rng: np.random.Generator, policy: AugmentPolicy) -> dict[str, bool]:
    """Decide which visual ops fire for one view.

    Gates are drawn before any op parameters so the apply-rate statistics do
    not depend on which ops fired earlier.
    """
    if policy.mode == "independent":
        draws = rng.random(len(VISUAL_OPS))
        return {op: bool(draws[i] < policy.apply_prob) for i, op in enumerate(VISUAL_OPS)}
    chosen = rng.choice(len(VISUAL_OPS), size=3, replace=False)
    draws = rng.random(3)
    gates = {op: False for op in VISUAL_OPS}
    for slot, idx in enumerate(chosen):
        gates[VISUAL_OPS[idx]] = bool(draws[slot] < policy.apply_prob)
    return gates


def sample_erase_rect(rng: np.random.Generator, height: int, width: int,
                area_range: tuple[float, float]) -> tuple[int, int, int, int]:
    """Rectangle whose exact integer area lands inside ``area_range``."""
    cells = height * width
    for _ in range(64):
        frac = rng.uniform(*area_range)
        aspect = rng.uniform(0.5, 2.0)
        h = int(round(math.sqrt(frac * cells * aspect)))
        h = min(max(h, 1), height)
        w = int(round(frac * cells / h))
        w = min(max(w, 1), width)
        if area_range[0] <= h * w / cells <= area_range[1]:
            y0 = int(rng.integers(0, height - h + 1))
            x0 = int(rng.integers(0, width - w + 1))
            return y0, x0, h, w
    raise RuntimeError("could not place an erase rectangle inside the area range")


def _apply_erase(v: np.ndarray, rng, policy) -> np.ndarray:
    y0, x0, h, w = sample_erase_rect(rng, v.shape[2], v.shape[3], policy.erase_area)
    v[:, :, y0:y0 + h, x0:x0 + w] = 0.0
    return v


def _apply_color_jitter(v: np.ndarray, rng, policy) -> np.ndarray:
    j = policy.jitter
    brightness = rng.uniform(1 - j, 1 + j)
    contrast = rng.uniform(1 - j, 1 + j)
    saturation = rng.uniform(1 - j, 1 + j)
    v *= brightness
    mean = v.mean()
    v = (v - mean) * contrast + mean
    gray = (0.299 * v[:, 0] + 0.587 * v[:, 1] + 0.114 * v[:, 2])[:, None]
    return gray + (v - gray) * saturation


def _apply_affine(v: np.ndarray, rng, policy) -> np.ndarray:
    # one transform shared by all frames, so the clip stays temporally coherent
    angle = math.radians(rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg))
    tx = rng.uniform(-policy.max_translate, policy.max_translate)
    ty = rng.uniform(-policy.max_translate, policy.max_translate)
    scale = rng.uniform(*policy.scale_range)
    cos, sin = math.cos(angle) / scale, math.sin(angle) / scale
    theta = torch.tensor([[cos, -sin, 2 * tx], [sin, cos, 2 * ty]], dtype=torch.float32)
    frames = torch.from_numpy(v)
    grid = torch.nn.functional.affine_grid(
        theta.expand(frames.shape[0], 2, 3), list(frames.shape), align_corners=False
    )
    warped = torch.nn.functional.grid_sample(
        frames, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return warped.numpy()


def _apply_color_drop(v: np.ndarray, rng, policy) -> np.ndarray:
    gray = (0.299 * v[:, 0] + 0.587 * v[:, 1] + 0.114 * v[:, 2])[:, None]
    return np.repeat(gray, 3, axis=1)


def _apply_gaussian_blur(v: np.ndarray, rng, policy) -> np.ndarray:
    sigma = rng.uniform(*policy.blur_sigma)
    radius = max(1, int(math.ceil(2.5 * sigma)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    k = torch.from_numpy(kernel.astype(np.float32))
    frames = torch.from_numpy(v)
    f, c, hh, ww = frames.shape
    x = frames.reshape(f * c, 1, hh, ww)
    x = torch.nn.functional.pad(x, (radius, radius, radius, radius), mode="reflect")
    x = torch.nn.functional.conv2d(x, k.view(1, 1, -1, 1))
    x = torch.nn.functional.conv2d(x, k.view(1, 1, 1, -1))
    return x.reshape(f, c, hh, ww).numpy()


def _apply_gaussian_noise(v: np.ndarray, rng, policy) -> np.ndarray:
    return v + rng.standard_normal(v.shape, dtype=np.float32) * policy.noise_sigma


_OP_FNS = {
    "erase": _apply_erase,
    "color_jitter": _apply_color_jitter,
    "affine": _apply_affine,
    "color_drop": _apply_color_drop,
    "gaussian_blur": _apply_gaussian_blur,
    "gaussian_noise": _apply_gaussian_noise,
}


def augment_vision(vision: np.ndarray, rng: np.random.Generator,
                   policy: AugmentPolicy | None = None) -> np.ndarray:
    """Randomized view of a (48, 3, H, W) float stack in [0, 1], same shape."""
    policy = policy or AugmentPolicy()
    if vision.ndim != 4 or vision.shape[1] != 3:
        raise ValueError(f"expected (F, 3, H, W), got {vision.shape}")
    gates = draw_op_gates(rng, policy)
    out = vision.astype(np.float32, copy=True)
    for op in VISUAL_OPS:
        if gates[op]:
            out = _OP_FNS[op](out, rng, policy)
    return np.clip(out, 0.0, 1.0, out=out)


def augment_audio(mel: np.ndarray, rng: np.random.Generator,
                  policy: AugmentPolicy | None = None,
                  fraction: float | None = None, fill: float = 0.0) -> np.ndarray:
    """Mask 10-20% of the mel cells with up to three rectangles.

    The realized cell count stays within half of the tallest rectangle's
    height of the drawn target, i.e. within +-66 cells on a 256x128 grid.
    ``fill`` defaults to 0.0, the representation floor of prepared grids.
    """
    policy = policy or AugmentPolicy()
    if mel.ndim != 2:
        raise ValueError(f"expected (T, M), got {mel.shape}")
    frames, bins = mel.shape
    target_frac = rng.uniform(*policy.mel_mask) if fraction is None else float(fraction)
    target = int(round(target_frac * frames * bins))
    max_h = min(frames, 132)  # bounds the final rounding error at 66 cells

    def attempt(n_rects: int) -> list[tuple[int, int, int, int]] | None:
        occupied = np.zeros((frames, bins), dtype=bool)
        rects = []
        remaining = target
        for i in range(n_rects):
            want = int(round(remaining / (n_rects - i)))
            if want < 1:
                break
            h_min = min(max(1, math.ceil(want / bins)), max_h)
            h = int(rng.integers(h_min, max_h + 1))
            w = min(max(int(round(want / h)), 1), bins)
            placed = False
            for _ in range(100):
                y0 = int(rng.integers(0, frames - h + 1))
                x0 = int(rng.integers(0, bins - w + 1))
                if not occupied[y0:y0 + h, x0:x0 + w].any():
                    placed = True
                    break
            if not placed:
                return None
            occupied[y0:y0 + h, x0:x0 + w] = True
            rects.append((y0, x0, h, w))
            remaining -= h * w
        return rects

    rects = attempt(int(rng.integers(1, 4)))
    if rects is None:
        rects = attempt(1)  # a single rectangle always fits on an empty grid
    out = mel.astype(np.float32, copy=True)
    for y0, x0, h, w in rects:
        out[y0:y0 + h, x0:x0 + w] = fill
    return out


def language_views(lang_batch, model):
    """Two encodings of the same tokens under independent dropout draws.

    The encoder must be in training mode with a positive dropout rate,
    otherwise the two views would coincide and the pair is rejected.
    """
    if not model.training:
        raise ValueError("language views need the encoder in training mode")
    if model.config.dropout <= 0.0:
        raise ValueError("language views need a positive dropout rate")
    return model.encode_language(lang_batch), model.encode_language(lang_batch)
