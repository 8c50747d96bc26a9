"""Training loop: Adam with step decay, per-step loss CSV, checkpoints with manifests."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import tensor as T
from .data import Dataset, dataset_iter
from .network import ARNet, ModelConfig, total_loss
from .optim import Adam, step_decay_lr
from .priors import boundary_gt
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "step", "loss_total", "loss_bce", "loss_iou", "loss_dice", "lr")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch: int = 8
    epochs: int = 150
    decay_epochs: int = 100
    seed: int = 0
    size: Optional[int] = None
    max_steps: Optional[int] = None
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    dtype: str = "float64"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class TrainResult:
    model: ARNet
    checkpoint: Path
    loss_csv: Path
    rows: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r[2] for r in self.rows]


def run_manifest(model: ARNet, cfg: TrainConfig, epoch: int, extra: dict = None) -> dict:
    """Everything needed to rebuild the run; deliberately free of wall-clock data."""
    m = {"config_hash": model.config_hash(), "epoch": epoch, "seed": cfg.seed, "code_version": __version__,
         "params": model.num_parameters()}
    m.update({f"train.{k}": v for k, v in asdict(cfg).items()})
    m.update({f"model.{k}": v for k, v in model.config.as_dict().items()})
    m.update(extra or {})
    return m


def save_model(path, model: ARNet, manifest: dict):
    save_checkpoint(path, model.export_state(), manifest)


def load_model(path, dtype=None) -> tuple[ARNet, dict]:
    """Rebuild an ARNet from a checkpoint; architecture flags come from its manifest."""
    tensors, manifest = load_checkpoint(path)
    mcfg = ModelConfig.from_dict({k[len("model."):]: v for k, v in manifest.items() if k.startswith("model.")})
    if dtype is None:
        dtype = manifest.get("train.dtype", "float64")
    model = ARNet(mcfg, seed=int(manifest.get("seed", 0)), dtype=np.dtype(dtype))
    model.import_state(tensors)
    return model, manifest


def train(data, cfg: TrainConfig, model_cfg: ModelConfig = None, out_dir=None,
          on_step: Callable[[tuple], None] = None, extra_manifest: dict = None) -> TrainResult:
    """Train on ``data`` (a :class:`Dataset` or dataset root) and write outputs to ``out_dir``.

    Outputs: ``loss.csv`` (one row per optimizer step), ``checkpoint.arnk``
    (final) and ``checkpoint_e{epoch}.arnk`` every ``checkpoint_every`` epochs.
    Two runs with equal arguments produce bitwise-identical files.
    """
    ds = data if isinstance(data, Dataset) else Dataset(data, size=cfg.size)
    dtype = np.dtype(cfg.dtype)
    model = ARNet(model_cfg or ModelConfig(), seed=cfg.seed, dtype=dtype)
    model.train()
    out_dir = Path(out_dir) if out_dir is not None else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.parameters(), lr=cfg.lr)
    csv_path = out_dir / "loss.csv"
    rows = []
    boundary_cache: dict = {}
    step = 0
    done = 0
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            opt.lr = step_decay_lr(cfg.lr, epoch, cfg.decay_epochs)
            for images, masks, stems in dataset_iter(ds, cfg.batch, shuffle_seed=cfg.seed, epoch=epoch, dtype=dtype):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                for s, m in zip(stems, masks):
                    if s not in boundary_cache:
                        boundary_cache[s] = boundary_gt(m[0])[None]
                gb = np.stack([boundary_cache[s] for s in stems]).astype(dtype)
                preds = model(Tensor(images))
                parts = total_loss(preds, masks, gb)
                opt.zero_grad()
                T.backward(parts.total)
                opt.step()
                row = (epoch, step, parts.total.item(), parts.bce, parts.iou, parts.dice, opt.lr)
                writer.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
                rows.append(row)
                if on_step:
                    on_step(row)
                step += 1
            done = epoch + 1
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_model(out_dir / f"checkpoint_e{epoch + 1}.arnk", model,
                           run_manifest(model, cfg, epoch + 1, extra_manifest))
    ckpt = out_dir / "checkpoint.arnk"
    save_model(ckpt, model, run_manifest(model, cfg, done, extra_manifest))
    log.info("trained %d steps, final checkpoint %s", step, ckpt)
    return TrainResult(model, ckpt, csv_path, rows)


def predict(model: ARNet, images: np.ndarray) -> dict:
    """Sigmoid probabilities of the final head plus the prior maps, at input resolution."""
    model.eval()
    with T.no_grad():
        preds = model(Tensor(images.astype(model.dtype)))
    H, W = images.shape[2:]
    out = {"mask": T._sigmoid(preds.P1.data)}
    if preds.B_full is not None:
        out["boundary"] = preds.B_full.data
    if preds.R is not None:
        out["region"] = T.resize_array(preds.R.data, (H, W))
    return out


def mean_iou(model: ARNet, data, batch: int = 8, threshold: float = 0.5) -> float:
    """Mean per-image IoU of the final head against the dataset masks (eval mode)."""
    from .metrics import dice_iou

    vals = []
    for images, masks, _ in dataset_iter(data, batch, shuffle_seed=None, dtype=model.dtype):
        probs = predict(model, images)["mask"]
        vals += [dice_iou(p[0], g[0], threshold)[1] for p, g in zip(probs, masks)]
    return float(np.mean(vals))
