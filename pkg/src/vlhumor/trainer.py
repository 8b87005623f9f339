"""Pre-training and fine-tuning loops, checkpoints, the multi-seed protocol.

Every random choice derives from the run seed through named streams, so a
(config, seed) pair fully determines each logged number on a given
platform. Checkpoints hold the config, all parameters and optimizer slots
as CVT1 containers, and the torch RNG state; reloading one and continuing
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import base64
import copy
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from . import container
from .augment import augment_audio, augment_vision
from .config import RunConfig, dataclass_from_dict, plain_dict, run_config_to_dict, save_config
from .eval_report import Metrics, compute_metrics
from .model import CollatedBatch, ModelConfig, TwoBranchModel, collate
from .objective import pretrain_loss
from .seeding import stream, torch_seed
from .signal_prep import Modalities, PrepDataset, ProcessedSample

PRETRAIN_COLUMNS = (
    "step", "epoch", "batch_size", "loss_v", "loss_v_prime", "loss_l",
    "loss_l_prime", "loss_total", "loss_per_sample", "temperature", "l2_term",
)
FINETUNE_COLUMNS = ("step", "epoch", "batch_size", "loss", "loss_per_sample", "l2_term")

EVAL_BATCH = 8  # fixed so metric logs do not depend on the training batch size


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".17g")


class CsvLogger:
    def __init__(self, path: Path, columns: tuple[str, ...]):
        self.path = Path(path)
        self.columns = columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(columns) + "\n")

    def row(self, **values) -> None:
        self._fh.write(",".join(_fmt(values[c]) for c in self.columns) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


# ---------------------------------------------------------------------------
# model/optimizer construction
# ---------------------------------------------------------------------------

def build_model(cfg: RunConfig, vocab_size: int) -> TwoBranchModel:
    mcfg = dataclasses.replace(
        cfg.model, vocab_size=cfg.model.vocab_size if cfg.model.vocab_size > 0 else vocab_size
    )
    torch.manual_seed(torch_seed(cfg.seed, "init"))
    return TwoBranchModel(mcfg)


def build_optimizer(model: TwoBranchModel, lr: float, weight_decay: float) -> torch.optim.AdamW:
    decayed, plain = [], []
    for name, param in model.named_parameters():
        # decaying the log-temperature would drag the temperature toward 1
        (plain if name == "log_temp" else decayed).append(param)
    return torch.optim.AdamW(
        [
            {"params": decayed, "weight_decay": weight_decay},
            {"params": plain, "weight_decay": 0.0},
        ],
        lr=lr,
    )


def weight_penalty(model: TwoBranchModel) -> torch.Tensor:
    total = model.log_temp.new_zeros(())
    for name, param in model.named_parameters():
        if name != "log_temp":
            total = total + param.square().sum()
    return total


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------

def epoch_batches(ids: list[str], seed: int, epoch: int, batch_size: int,
                  min_size: int = 1) -> tuple[list[list[str]], int]:
    """Deterministic shuffled batches; tails below ``min_size`` are dropped."""
    order = stream(seed, "order", epoch).permutation(len(ids))
    shuffled = [ids[int(i)] for i in order]
    chunks = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    dropped = 0
    if chunks and len(chunks[-1]) < min_size:
        dropped = len(chunks.pop())
    return chunks, dropped


def augment_sample(sample: ProcessedSample, policy, seed: int, epoch: int) -> ProcessedSample:
    rng = stream(seed, "augment", epoch, sample.id)
    return dataclasses.replace(
        sample,
        vision=augment_vision(sample.vision, rng, policy),
        mel=augment_audio(sample.mel, rng, policy),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: TwoBranchModel, cfg: RunConfig | None = None,
                    optimizer: torch.optim.AdamW | None = None,
                    step: int = 0, epoch: int = 0) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    save_config({"model": plain_dict(model.config)}, path / "model.yaml")
    if cfg is not None:
        save_config(run_config_to_dict(cfg), path / "config.yaml")
    for name, param in model.named_parameters():
        data = param.detach().cpu().numpy()
        if data.dtype != np.float32:
            raise ValueError(f"checkpoints store float32 parameters; {name} is {data.dtype}")
        container.write_tensor(path / "params" / f"{name}.cvt", data)
    if optimizer is not None:
        sd = optimizer.state_dict()
        odir = path / "optim"
        odir.mkdir(exist_ok=True)
        index = {"param_groups": sd["param_groups"], "state": {}}
        for idx, slots in sd["state"].items():
            index["state"][str(idx)] = sorted(slots.keys())
            for key, value in slots.items():
                arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.float32(value)
                container.write_tensor(odir / f"{idx}.{key}.cvt", np.asarray(arr, dtype=np.float32))
        (odir / "index.json").write_text(json.dumps(index), encoding="utf-8")
    state = {"step": step, "epoch": epoch, "vocab_size": model.config.vocab_size}
    (path / "state.json").write_text(json.dumps(state), encoding="utf-8")
    rng = {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")}
    (path / "rng.json").write_text(json.dumps(rng), encoding="utf-8")
    return path


@dataclass
class CheckpointBundle:
    model: TwoBranchModel
    model_config: ModelConfig
    step: int
    epoch: int
    path: Path


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    raw = yaml.safe_load((path / "model.yaml").read_text(encoding="utf-8"))["model"]
    mcfg = dataclass_from_dict(ModelConfig, raw, "model")
    model = TwoBranchModel(mcfg)
    tensors = {}
    for name, param in model.named_parameters():
        arr = container.read_tensor(path / "params" / f"{name}.cvt")
        tensors[name] = torch.from_numpy(arr)
    model.load_state_dict(tensors)
    state = json.loads((path / "state.json").read_text(encoding="utf-8"))
    return CheckpointBundle(
        model=model, model_config=mcfg,
        step=state["step"], epoch=state["epoch"], path=path,
    )


def load_optimizer(path: str | Path, model: TwoBranchModel, lr: float,
                   weight_decay: float) -> torch.optim.AdamW:
    path = Path(path)
    optimizer = build_optimizer(model, lr, weight_decay)
    index = json.loads((path / "optim" / "index.json").read_text(encoding="utf-8"))
    state: dict[int, dict] = {}
    for idx, keys in index["state"].items():
        slots = {}
        for key in keys:
            arr = container.read_tensor(path / "optim" / f"{idx}.{key}.cvt")
            slots[key] = torch.from_numpy(arr)
        state[int(idx)] = slots
    optimizer.load_state_dict({"state": state, "param_groups": index["param_groups"]})
    return optimizer


def restore_rng(path: str | Path) -> None:
    rng = json.loads((Path(path) / "rng.json").read_text(encoding="utf-8"))
    buffer = np.frombuffer(base64.b64decode(rng["torch"]), dtype=np.uint8).copy()
    torch.set_rng_state(torch.from_numpy(buffer))


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    out_dir: Path
    final_checkpoint: Path
    metrics_path: Path
    epoch_mean_loss: list[float]  # per-sample contrastive loss averaged per epoch


def pretrain(dataset: PrepDataset, cfg: RunConfig, resume_from: str | Path | None = None) -> PretrainResult:
    cfg.validate()
    mask = cfg.mask()
    if not mask.video_branch() or not mask.language_branch():
        raise ValueError(
            f"pre-training requires both branches; modality mask {mask.label()} leaves one empty"
        )
    ids = dataset.unlabeled_ids
    if not ids:
        raise ValueError("no unlabeled samples to pre-train on")
    if cfg.batch_size < 2:
        raise ValueError("pre-training needs batch_size >= 2 for negatives")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    step = 0
    if resume_from is None:
        model = build_model(cfg, dataset.vocab_size())
        optimizer = build_optimizer(
            model, cfg.learning_rate, 0.0 if cfg.l2_in_loss else cfg.weight_decay
        )
        torch.manual_seed(torch_seed(cfg.seed, "train"))
    else:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        optimizer = load_optimizer(
            resume_from, model, cfg.learning_rate, 0.0 if cfg.l2_in_loss else cfg.weight_decay
        )
        restore_rng(resume_from)
        start_epoch = bundle.epoch
        step = bundle.step

    log = CsvLogger(out_dir / "metrics.csv", PRETRAIN_COLUMNS)
    summary = CsvLogger(out_dir / "epochs.csv", ("epoch", "mean_loss_per_sample", "batches", "dropped"))
    epoch_means: list[float] = []
    try:
        for epoch in range(start_epoch + 1, cfg.resolved_epochs + 1):
            batches, dropped = epoch_batches(ids, cfg.seed, epoch, cfg.batch_size, min_size=2)
            loss_sum = 0.0
            count = 0
            model.train()
            for batch_ids in batches:
                samples = [dataset.load(i) for i in batch_ids]
                augmented = [augment_sample(s, cfg.augment, cfg.seed, epoch) for s in samples]
                orig = collate(samples, model.config, mask)
                aug = collate(augmented, model.config, mask)
                views = model.pretrain_views(orig, aug, mask)
                breakdown = pretrain_loss(views, model.temperature, normalize=cfg.normalize_sims)
                loss = breakdown.total
                l2 = loss.new_zeros(())
                if cfg.l2_in_loss:
                    l2 = cfg.weight_decay * weight_penalty(model)
                    loss = loss + l2
                if not math.isfinite(float(loss)):
                    raise RuntimeError(f"non-finite pre-training loss at step {step}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step += 1
                batch = len(batch_ids)
                loss_sum += float(breakdown.total)
                count += batch
                log.row(
                    step=step, epoch=epoch, batch_size=batch,
                    loss_v=breakdown.video_nce, loss_v_prime=breakdown.video_norm,
                    loss_l=breakdown.lang_nce, loss_l_prime=breakdown.lang_norm,
                    loss_total=breakdown.total, loss_per_sample=float(breakdown.total) / batch,
                    temperature=model.temperature, l2_term=l2,
                )
            mean = loss_sum / max(count, 1)
            epoch_means.append(mean)
            summary.row(epoch=epoch, mean_loss_per_sample=mean, batches=len(batches), dropped=dropped)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}",
                                model, cfg, optimizer, step=step, epoch=epoch)
        final = save_checkpoint(out_dir / "final", model, cfg, optimizer,
                                step=step, epoch=cfg.resolved_epochs)
    finally:
        log.close()
        summary.close()
    return PretrainResult(
        out_dir=out_dir, final_checkpoint=final,
        metrics_path=out_dir / "metrics.csv", epoch_mean_loss=epoch_means,
    )


# ---------------------------------------------------------------------------
# evaluation and fine-tuning
# ---------------------------------------------------------------------------

def evaluate(model: TwoBranchModel, dataset: PrepDataset, ids: list[str],
             mask: Modalities) -> tuple[Metrics, list[dict]]:
    was_training = model.training
    model.eval()
    y_true, y_pred, rows = [], [], []
    with torch.no_grad():
        for lo in range(0, len(ids), EVAL_BATCH):
            chunk = ids[lo:lo + EVAL_BATCH]
            samples = [dataset.load(i) for i in chunk]
            batch = collate(samples, model.config, mask)
            probs = model.classify(model.encode_batch(batch, mask).pooled)
            pred = probs.argmax(dim=-1)
            for sample, p, prob in zip(samples, pred.tolist(), probs[:, 1].tolist()):
                rows.append({"id": sample.id, "label": sample.label, "pred": p, "prob_1": prob})
                if sample.label is not None:
                    y_true.append(sample.label)
                    y_pred.append(p)
    if was_training:
        model.train()
    metrics = compute_metrics(y_true, y_pred) if y_true else None
    return metrics, rows


@dataclass
class FinetuneResult:
    out_dir: Path
    best_epoch: int
    dev: Metrics
    test: Metrics | None
    best_checkpoint: Path
    history_path: Path
    split_ids: dict[str, list[str]]


def finetune(dataset: PrepDataset, cfg: RunConfig) -> FinetuneResult:
    cfg.validate()
    mask = cfg.mask()
    train_m, dev_m, test_m = dataset.split(cfg.data.sizes(), cfg.seed)
    splits = {
        "train": [e.id for e in train_m.entries],
        "dev": [e.id for e in dev_m.entries],
        "test": [e.id for e in test_m.entries],
    }
    if not splits["train"]:
        raise ValueError("fine-tuning needs a non-empty train split")
    missing = [i for i in splits["train"] if dataset.label(i) is None]
    if missing:
        raise ValueError(f"train samples without labels: {missing[:5]}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.init_checkpoint:
        bundle = load_checkpoint(cfg.init_checkpoint)
        model = bundle.model
        if bundle.model_config.vocab_size != dataset.vocab_size():
            raise ValueError(
                f"checkpoint vocab {bundle.model_config.vocab_size} != corpus vocab {dataset.vocab_size()}"
            )
    else:
        model = build_model(cfg, dataset.vocab_size())
    optimizer = build_optimizer(
        model, cfg.learning_rate, 0.0 if cfg.l2_in_loss else cfg.weight_decay
    )
    torch.manual_seed(torch_seed(cfg.seed, "train"))

    log = CsvLogger(out_dir / "metrics.csv", FINETUNE_COLUMNS)
    history = CsvLogger(out_dir / "epochs.csv", ("epoch", "train_loss", "dev_accuracy", "dev_macro_f1"))
    # best-epoch selection uses dev accuracy; with no dev split it falls back
    # to train accuracy (overfitting checks)
    select_ids = splits["dev"] or splits["train"]
    best_state = None
    best = (-1.0, 0)  # (selection accuracy, epoch)
    step = 0
    try:
        for epoch in range(1, cfg.resolved_epochs + 1):
            batches, _ = epoch_batches(splits["train"], cfg.seed, epoch, cfg.batch_size, min_size=1)
            model.train()
            epoch_loss = 0.0
            seen = 0
            for batch_ids in batches:
                samples = [dataset.load(i) for i in batch_ids]
                batch = collate(samples, model.config, mask)
                logits = model(batch, mask)
                loss = torch.nn.functional.cross_entropy(logits, batch.labels, reduction="sum")
                l2 = loss.new_zeros(())
                if cfg.l2_in_loss:
                    l2 = cfg.weight_decay * weight_penalty(model)
                    loss = loss + l2
                if not math.isfinite(float(loss)):
                    raise RuntimeError(f"non-finite fine-tuning loss at step {step}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step += 1
                epoch_loss += float(loss)
                seen += len(batch_ids)
                log.row(step=step, epoch=epoch, batch_size=len(batch_ids), loss=loss,
                        loss_per_sample=float(loss) / len(batch_ids), l2_term=l2)
            dev_metrics, _ = evaluate(model, dataset, select_ids, mask)
            history.row(epoch=epoch, train_loss=epoch_loss / max(seen, 1),
                        dev_accuracy=dev_metrics.accuracy, dev_macro_f1=dev_metrics.macro_f1)
            if dev_metrics.accuracy > best[0]:
                best = (dev_metrics.accuracy, epoch)
                best_state = copy.deepcopy(model.state_dict())
    finally:
        log.close()
        history.close()

    model.load_state_dict(best_state)
    best_dir = save_checkpoint(out_dir / "best", model, cfg, step=step, epoch=best[1])
    dev_metrics, _ = evaluate(model, dataset, select_ids, mask)
    test_metrics = None
    if splits["test"]:
        test_metrics, _ = evaluate(model, dataset, splits["test"], mask)
    report = {
        "best_epoch": best[1],
        "dev": dev_metrics.to_dict(),
        "test": test_metrics.to_dict() if test_metrics else None,
    }
    (out_dir / "result.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return FinetuneResult(
        out_dir=out_dir, best_epoch=best[1], dev=dev_metrics, test=test_metrics,
        best_checkpoint=best_dir, history_path=out_dir / "epochs.csv", split_ids=splits,
    )


# ---------------------------------------------------------------------------
# five-run protocol
# ---------------------------------------------------------------------------

def trimmed_aggregate(per_run: list[dict[str, float]], key: str = "accuracy") -> dict:
    """Drop the best and worst run by ``key``; mean and population std of the rest."""
    if len(per_run) < 3:
        raise ValueError("need at least 3 runs to drop the extremes")
    values = [run[key] for run in per_run]
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    kept = sorted(order[1:-1])
    out = {"kept_runs": kept, "dropped_low": order[0], "dropped_high": order[-1],
           "mean": {}, "std": {}}
    metrics = [m for m in per_run[0] if isinstance(per_run[0][m], (int, float))]
    for metric in metrics:
        vals = np.array([per_run[i][metric] for i in kept], dtype=np.float64)
        out["mean"][metric] = float(vals.mean())
        out["std"][metric] = float(vals.std(ddof=0))
    return out


@dataclass
class ProtocolResult:
    out_dir: Path
    per_run: list[dict]
    aggregate: dict


def run_protocol(dataset: PrepDataset, cfg: RunConfig, n_runs: int | None = None) -> ProtocolResult:
    n_runs = n_runs or cfg.protocol_runs
    if n_runs < 3:
        raise ValueError("the protocol needs at least 3 runs")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_run = []
    for k in range(n_runs):
        run_cfg = dataclasses.replace(
            cfg, seed=cfg.seed + k, out_dir=str(out_dir / f"run_{k:02d}"), stage="finetune"
        )
        result = finetune(dataset, run_cfg)
        chosen = result.test if result.test is not None else result.dev
        row = {"run": k, "seed": run_cfg.seed, "best_epoch": result.best_epoch}
        row.update({m: v for m, v in chosen.to_flat_dict().items()})
        per_run.append(row)
    numeric = [{k: v for k, v in row.items() if k not in ("run", "seed", "best_epoch")}
               for row in per_run]
    aggregate = trimmed_aggregate(numeric, key="accuracy")
    payload = {"runs": per_run, "aggregate": aggregate}
    (out_dir / "protocol.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return ProtocolResult(out_dir=out_dir, per_run=per_run, aggregate=aggregate)
