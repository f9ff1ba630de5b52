"""Two-head classifier: shared backbone, class head and transform head."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .xforms import N_TRANSFORMS

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
ARCHS = ("small_cnn", "tiny_cnn", "mobilenet_v2")


class TrainingError(RuntimeError):
    pass


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


def build_backbone(arch: str, pretrained: bool = False) -> tuple[nn.Module, int, int]:
    """Return ``(module, representation width, minimum input side)``."""
    if arch == "small_cnn":
        widths = (32, 64, 96, 128)
        layers, cin = [], 3
        for w in widths:
            layers.append(_block(cin, w))
            cin = w
        body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        return body, widths[-1], 16
    if arch == "tiny_cnn":
        # smooth and BN-free so finite differences are meaningful
        body = nn.Sequential(nn.Conv2d(3, 6, 3, padding=1), nn.Tanh(), nn.AdaptiveAvgPool2d(1), nn.Flatten())
        return body, 6, 3
    if arch == "mobilenet_v2":
        from torchvision.models import MobileNet_V2_Weights, mobilenet_v2

        net = mobilenet_v2(weights=MobileNet_V2_Weights.IMAGENET1K_V1 if pretrained else None)
        body = nn.Sequential(net.features, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        return body, net.last_channel, 32
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")


class TwoHeadModel(nn.Module):
    """Backbone feeding a class head and a 7-way transform head.

    Both heads read the same pooled representation. ``dropout`` sits on the
    class-head path only and is what the MC-Dropout scorer switches on.
    """

    def __init__(self, n_classes: int, arch: str = "small_cnn", pretrained: bool = False, dropout: float | None = 0.2):
        super().__init__()
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.arch = arch
        self.pretrained = pretrained
        self.n_classes = n_classes
        self.backbone, self.width, self.min_side = build_backbone(arch, pretrained)
        self.dropout = nn.Dropout(dropout) if dropout is not None else None
        self.class_head = nn.Linear(self.width, n_classes)
        self.xform_head = nn.Linear(self.width, N_TRANSFORMS)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or min(x.shape[2:]) < self.min_side:
            raise ValueError(f"{self.arch} expects (B, 3, H>={self.min_side}, W>={self.min_side}), got {tuple(x.shape)}")
        z = self.backbone(x)
        zc = self.dropout(z) if self.dropout is not None else z
        return self.class_head(zc), self.xform_head(z)


def build_model(n_classes, arch="small_cnn", pretrained=False, dropout=0.2, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return TwoHeadModel(n_classes, arch, pretrained, dropout).to(dtype)


def to_input(tiles: np.ndarray, pretrained: bool = False, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``(B, H, W, 3)`` -> float ``(B, 3, H, W)`` on [0, 1], ImageNet-normalised if pretrained."""
    x = torch.from_numpy(np.ascontiguousarray(tiles)).to(dtype).permute(0, 3, 1, 2) / 255.0
    if pretrained:
        mean = torch.tensor(IMAGENET_MEAN, dtype=dtype).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=dtype).view(1, 3, 1, 1)
        x = (x - mean) / std
    return x.contiguous()


@dataclass
class ForwardOutput:
    class_logits: np.ndarray
    xform_logits: np.ndarray
    class_probs: np.ndarray
    xform_probs: np.ndarray


@torch.no_grad()
def forward(model: TwoHeadModel, tiles: np.ndarray) -> ForwardOutput:
    """Deterministic (eval-mode) forward pass on a batch of uint8 tiles."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        cl, xl = model(to_input(tiles, model.pretrained, dtype))
    finally:
        model.train(was_training)
    return ForwardOutput(
        cl.double().numpy(),
        xl.double().numpy(),
        torch.softmax(cl.double(), 1).numpy(),
        torch.softmax(xl.double(), 1).numpy(),
    )


def joint_loss(class_logits, y, xform_logits, t, lam: float = 1.0):
    """Mean class cross-entropy plus ``lam`` times mean transform cross-entropy.

    Returns ``(total, class_part, transform_part)``.
    """
    y = torch.as_tensor(y, dtype=torch.long)
    t = torch.as_tensor(t, dtype=torch.long)
    n = class_logits.shape[1]
    if y.numel() and (y.min() < 0 or y.max() >= n):
        raise ValueError(f"class label outside [0, {n - 1}]")
    if t.numel() and (t.min() < 0 or t.max() >= xform_logits.shape[1]):
        raise ValueError(f"transform label outside [0, {xform_logits.shape[1] - 1}]")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    lc = F.cross_entropy(class_logits, y)
    lx = F.cross_entropy(xform_logits, t)
    return lc + lam * lx, lc, lx


def cyclical_lr(step: int, steps_per_cycle: int, base_lr: float = 0.01, floor_ratio: float = 0.01) -> float:
    """Sawtooth: linear from ``base_lr`` down to ``base_lr * floor_ratio``, then restart."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if steps_per_cycle <= 1:
        return base_lr
    pos = step % steps_per_cycle
    return base_lr - (base_lr - base_lr * floor_ratio) * pos / (steps_per_cycle - 1)


def steps_per_cycle(epochs: int, steps_per_epoch: int, cycles: int = 4) -> int:
    return max(steps_per_epoch, math.ceil(epochs * steps_per_epoch / cycles))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.01
    lam: float = 1.0
    cycles: int = 4
    lr_floor_ratio: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    state_dict: dict
    epoch: int
    val_acc: float
    meta: dict = field(default_factory=dict)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_class: float
    loss_xform: float
    val_acc: float


@torch.no_grad()
def evaluate_accuracy(model: TwoHeadModel, batches: Iterable) -> float:
    hits = total = 0
    for b in batches:
        pred = forward(model, b.tiles).class_logits.argmax(1)
        hits += int((pred == b.class_labels).sum())
        total += len(b)
    if total == 0:
        raise ValueError("no samples to evaluate")
    return hits / total


def fit(
    model: TwoHeadModel,
    train_batches: Callable[[int], Iterable],
    val_batches: Callable[[], Iterable],
    cfg: TrainConfig,
    steps_per_epoch: int,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Adam + cyclical LR; keep the epoch with the best validation accuracy.

    ``train_batches(epoch)`` yields augmented batches, ``val_batches()`` the
    untransformed validation set. Ties in validation accuracy keep the
    earliest epoch.
    """
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    cycle = steps_per_cycle(cfg.epochs, steps_per_epoch, cfg.cycles)
    best: Checkpoint | None = None
    history: list[EpochLog] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums = np.zeros(2)
        n_seen = 0
        lr = cfg.base_lr
        for bi, batch in enumerate(train_batches(epoch)):
            lr = cyclical_lr(step, cycle, cfg.base_lr, cfg.lr_floor_ratio)
            for g in opt.param_groups:
                g["lr"] = lr
            x = to_input(batch.tiles, model.pretrained, dtype)
            cl, xl = model(x)
            loss, lc, lx = joint_loss(cl, batch.class_labels, xl, batch.transform_labels, cfg.lam)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: class={lc.item()} xform={lx.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += len(batch) * np.array([lc.item(), lx.item()])
            n_seen += len(batch)
            step += 1
        val_acc = evaluate_accuracy(model, val_batches())
        entry = EpochLog(epoch, float(lr), float(sums[0] / max(n_seen, 1)), float(sums[1] / max(n_seen, 1)), float(val_acc))
        history.append(entry)
        log.info("epoch %d lr %.5f loss_c %.4f loss_x %.4f val_acc %.4f", *asdict(entry).values())
        if on_epoch is not None:
            on_epoch(entry)
        if best is None or val_acc > best.val_acc:
            best = Checkpoint(copy.deepcopy(model.state_dict()), epoch, val_acc)
    model.load_state_dict(best.state_dict)
    return best, history


def write_training_log(history: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss_class", "loss_xform", "val_acc"])
        for e in history:
            w.writerow([e.epoch, repr(e.lr), repr(e.loss_class), repr(e.loss_xform), repr(e.val_acc)])


def read_training_log(path: str | Path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        return [
            EpochLog(int(r["epoch"]), float(r["lr"]), float(r["loss_class"]), float(r["loss_xform"]), float(r["val_acc"]))
            for r in csv.DictReader(fh)
        ]


def save_checkpoint(path: str | Path, model: TwoHeadModel, ckpt: Checkpoint, class_names, config_hash: str = "", extra=None) -> None:
    torch.save(
        {
            "arch": model.arch,
            "pretrained": model.pretrained,
            "n_classes": model.n_classes,
            "class_names": list(class_names),
            "dropout": model.dropout.p if model.dropout is not None else None,
            "state_dict": ckpt.state_dict,
            "config_hash": config_hash,
            "epoch": ckpt.epoch,
            "val_acc": ckpt.val_acc,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[TwoHeadModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = TwoHeadModel(blob["n_classes"], blob["arch"], pretrained=False, dropout=blob["dropout"])
    model.pretrained = blob["pretrained"]
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: v for k, v in blob.items() if k != "state_dict"}
    return model, meta
