"""Classification metrics, attention averaging, embedding exports.

Weighted aggregates are support-weighted per true class; macro aggregates
are plain class means. Precision/recall/F1 with an empty denominator are
defined as 0 and flagged.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TwoBranchModel, collate, fused_block_bounds
from .signal_prep import Modalities, ProcessedSample


@dataclass
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Metrics:
    accuracy: float
    per_class: dict[int, ClassStats]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": {
                str(c): vars(s).copy() for c, s in sorted(self.per_class.items())
            },
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "weighted": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "zero_division": list(self.zero_division),
        }

    def to_flat_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
        }


def compute_metrics(y_true, y_pred) -> Metrics:
    """Confusion-matrix metrics for binary labels."""
    y_true = list(y_true)
    y_pred = list(y_pred)
    if not y_true or len(y_true) != len(y_pred):
        raise ValueError(f"label vectors must be equal-length and non-empty: {len(y_true)} vs {len(y_pred)}")
    bad = [v for v in y_true + y_pred if v not in (0, 1)]
    if bad:
        raise ValueError(f"labels must be 0 or 1, got {bad[:5]}")

    n = len(y_true)
    accuracy = sum(t == p for t, p in zip(y_true, y_pred)) / n
    flags: list[str] = []
    per_class: dict[int, ClassStats] = {}
    for c in (0, 1):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = tp + fn
        if tp + fp:
            precision = tp / (tp + fp)
        else:
            precision = 0.0
            flags.append(f"precision[{c}]")
        if support:
            recall = tp / support
        else:
            recall = 0.0
            flags.append(f"recall[{c}]")
        if precision + recall:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
            flags.append(f"f1[{c}]")
        per_class[c] = ClassStats(precision=precision, recall=recall, f1=f1, support=support)

    def macro(attr):
        return (getattr(per_class[0], attr) + getattr(per_class[1], attr)) / 2

    def weighted(attr):
        return sum(getattr(per_class[c], attr) * per_class[c].support for c in (0, 1)) / n

    return Metrics(
        accuracy=accuracy,
        per_class=per_class,
        macro_precision=macro("precision"),
        macro_recall=macro("recall"),
        macro_f1=macro("f1"),
        weighted_precision=weighted("precision"),
        weighted_recall=weighted("recall"),
        weighted_f1=weighted("f1"),
        zero_division=flags,
    )


# ---------------------------------------------------------------------------
# attention averaging
# ---------------------------------------------------------------------------

def attention_summary(model: TwoBranchModel, samples: list[ProcessedSample],
                      mask: Modalities, batch_size: int = 2) -> tuple[np.ndarray, dict]:
    """Fusion-encoder self-attention averaged over heads, layers and samples.

    Samples run through the canonical slotted language layout so every
    attention matrix shares one cell addressing; rows of the average sum
    to 1 because every row of every constituent matrix does.
    """
    if not samples:
        raise ValueError("attention summary needs at least one sample")
    was_training = model.training
    model.eval()
    total: np.ndarray | None = None
    count = 0
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = collate(chunk, model.config, mask, canonical_language=True)
            _, layer_weights = model.encode_batch(batch, mask, collect=True)
            for weights in layer_weights:  # (B, H, L, L) per layer
                summed = weights.to(torch.float64).sum(dim=(0, 1)).numpy()
                total = summed if total is None else total + summed
                count += weights.shape[0] * weights.shape[1]
    if was_training:
        model.train()
    mean = total / count
    row_sums = mean.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-5):
        raise AssertionError(f"attention rows must sum to 1, worst {abs(row_sums - 1).max():.2e}")
    return mean, fused_block_bounds(model.config, mask)


def export_attention_summary(model: TwoBranchModel, samples: list[ProcessedSample],
                             mask: Modalities, out_dir: str | Path,
                             prefix: str = "attention") -> dict:
    """Write the averaged attention matrix as CSV plus an annotated heatmap."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix, bounds = attention_summary(model, samples, mask)
    csv_path = out_dir / f"{prefix}.csv"
    np.savetxt(csv_path, matrix, delimiter=",")
    bounds_path = out_dir / f"{prefix}_blocks.json"
    bounds_path.write_text(json.dumps({k: list(v) for k, v in bounds.items()}), encoding="utf-8")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    im = ax.imshow(matrix, cmap="viridis", interpolation="nearest")
    for name, (start, end) in bounds.items():
        if start > 0:
            ax.axhline(start - 0.5, color="gray", linestyle="--", linewidth=0.8)
            ax.axvline(start - 0.5, color="gray", linestyle="--", linewidth=0.8)
        ax.text(start + (end - start) / 2, -4, name, ha="center", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    png_path = out_dir / f"{prefix}.png"
    fig.savefig(png_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return {"csv": csv_path, "png": png_path, "blocks": bounds_path}


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def fused_embeddings(model: TwoBranchModel, samples: list[ProcessedSample],
                     mask: Modalities, batch_size: int = 8) -> np.ndarray:
    was_training = model.training
    model.eval()
    rows = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = collate(chunk, model.config, mask)
            rows.append(model.encode_batch(batch, mask).pooled.numpy())
    if was_training:
        model.train()
    return np.concatenate(rows, axis=0)


def pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def export_embeddings(model: TwoBranchModel, samples: list[ProcessedSample],
                      mask: Modalities, out_dir: str | Path,
                      prefix: str = "embeddings", with_pca: bool = True) -> dict:
    """One CSV row per sample: id, label, then the fused vector."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vectors = fused_embeddings(model, samples, mask)
    dim = vectors.shape[1]
    csv_path = out_dir / f"{prefix}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{i}" for i in range(dim)])
        for sample, vec in zip(samples, vectors):
            label = "" if sample.label is None else sample.label
            writer.writerow([sample.id, label] + [format(float(v), ".8g") for v in vec])
    paths = {"csv": csv_path}
    if with_pca:
        coords = pca_2d(vectors.astype(np.float64))
        pca_path = out_dir / f"{prefix}_pca.csv"
        with open(pca_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", "x", "y"])
            for sample, (x, y) in zip(samples, coords):
                label = "" if sample.label is None else sample.label
                writer.writerow([sample.id, label, format(x, ".8g"), format(y, ".8g")])
        paths["pca_csv"] = pca_path

        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        labels = np.array([-1 if s.label is None else s.label for s in samples])
        for value, color in ((0, "tab:blue"), (1, "tab:red"), (-1, "tab:gray")):
            pick = labels == value
            if pick.any():
                name = {0: "class 0", 1: "class 1", -1: "unlabeled"}[value]
                ax.scatter(coords[pick, 0], coords[pick, 1], s=12, c=color, label=name, alpha=0.7)
        ax.legend()
        ax.set_title("fused representation (PCA)")
        png_path = out_dir / f"{prefix}_pca.png"
        fig.savefig(png_path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        paths["pca_png"] = png_path
    return paths
