"""SGD training with weak-label warm-up and periodic pseudo-label carving."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import carve as carving
from .data import WeakDataset, batch_iterator
from .loss import NEGATIVE, POSITIVE, carving_loss, sigmoid_ce, softmax_nll, weak_targets
from .nn import CheckpointError, Network, backward, forward, load_checkpoint, predict_logits, save_checkpoint
from .tensor import Rng

log = logging.getLogger(__name__)

LOSS_HEADS = ("softmax", "sigmoid_ce", "deep_carve")
METRIC_FIELDS = ("epoch", "phase", "loss", "val_precision", "carve_iteration")
WARMUP_FRACTION = 0.12
# fields that may differ between an interrupted run and its resumption
_RESUME_EXEMPT = ("run_dir",)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 500
    warmup_epochs: int | None = None
    carve_period: int = 5
    gamma: float = carving.DEFAULT_GAMMA
    positive: float = POSITIVE
    negative: float = NEGATIVE
    lr_step_epochs: int = 0
    lr_step_factor: float = 0.1
    seed: int = 0
    loss: str = "deep_carve"
    run_dir: str | None = None

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = int(round(WARMUP_FRACTION * self.max_epochs))
        if self.loss not in LOSS_HEADS:
            raise ValueError(f"loss must be one of {LOSS_HEADS}, got {self.loss!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.carve_period < 1:
            raise ValueError("lr, batch_size, max_epochs and carve_period must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be >= 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.loss == "deep_carve" and self.max_epochs < self.warmup_epochs:
            raise ValueError("max_epochs must be >= warmup_epochs in deep_carve mode")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def comparable(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if k not in _RESUME_EXEMPT}


@dataclass
class TrainState:
    rng: Rng
    epoch: int = 0
    iteration: int = 0
    carve_iteration: int = 0
    carved_epoch: int = 0                   # epoch whose start produced ``targets``
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    targets: np.ndarray | None = None       # current pseudo-labels, None = weak labels
    metrics: list[dict[str, Any]] = field(default_factory=list)

    @property
    def target_source(self) -> str:
        return "weak" if self.targets is None else f"pseudo@{self.carve_iteration}"


def sgd_step(net: Network, grads: dict[str, np.ndarray], state: TrainState, config: TrainConfig,
             lr: float | None = None) -> None:
    """``v <- mu*v - lr*(g + wd*w); w <- w + v`` for every parameter, in place."""
    lr = config.lr if lr is None else lr
    for name, w in net.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient for {name}: {bad} of {g.size} entries "
                                     f"(epoch {state.epoch + 1}, iteration {state.iteration})")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = config.momentum * v - lr * (g + config.weight_decay * w)
        state.velocity[name] = v
        net.params[name] = w + v
    net.version += 1
    state.iteration += 1


def _learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.lr_step_epochs <= 0:
        return config.lr
    return config.lr * config.lr_step_factor ** ((epoch - 1) // config.lr_step_epochs)


def val_precision(net: Network, dataset: WeakDataset) -> float | None:
    """Top-1 agreement with the single weak label on the validation split."""
    val = dataset.val
    if len(val) == 0:
        return None
    logits = predict_logits(net, val.images)
    return float(np.mean(np.argmax(logits, axis=1) == val.weak_labels))


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics(path, rows: list[dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def save_train_checkpoint(path, net: Network, state: TrainState, config: TrainConfig,
                          dataset_hash: str) -> None:
    extra = {
        "config": config.comparable(),
        "dataset": dataset_hash,
        "state": {
            "epoch": state.epoch,
            "iteration": state.iteration,
            "carve_iteration": state.carve_iteration,
            "carved_epoch": state.carved_epoch,
            "rng": state.rng.get_state(),
            "metrics": state.metrics,
            "has_targets": state.targets is not None,
        },
    }
    tensors = {f"velocity/{k}": v for k, v in state.velocity.items()}
    if state.targets is not None:
        tensors["targets"] = state.targets
    save_checkpoint(path, net, extra, tensors)


def load_train_checkpoint(path, config: TrainConfig | None = None, dataset: WeakDataset | None = None):
    """Return ``(net, state, stored_config_dict)``, enforcing config and dataset identity."""
    net, extra, tensors = load_checkpoint(path)
    if "state" not in extra:
        raise CheckpointError(f"{path}: no training state stored")
    if config is not None and extra["config"] != json.loads(json.dumps(config.comparable())):
        diff = sorted(k for k, v in config.comparable().items() if extra["config"].get(k) != v)
        raise CheckpointError(f"{path}: config differs from checkpoint in {diff}")
    if dataset is not None and extra["dataset"] != dataset.fingerprint():
        raise CheckpointError(f"{path}: dataset differs from the one the checkpoint was trained on")
    s = extra["state"]
    state = TrainState(
        rng=Rng.from_state(s["rng"]),
        epoch=s["epoch"],
        iteration=s["iteration"],
        carve_iteration=s["carve_iteration"],
        carved_epoch=s["carved_epoch"],
        velocity={k[len("velocity/"):]: v for k, v in tensors.items() if k.startswith("velocity/")},
        targets=tensors.get("targets") if s["has_targets"] else None,
        metrics=s["metrics"],
    )
    return net, state, extra["config"]


def _head(config: TrainConfig, state: TrainState):
    if config.loss == "softmax":
        return softmax_nll
    if config.loss == "deep_carve" and state.targets is not None:
        return carving_loss
    return sigmoid_ce


def train(dataset: WeakDataset, net: Network, config: TrainConfig, state: TrainState | None = None,
          stop_after: int | None = None):
    """Train ``net`` in place; returns ``(net, metrics rows)``.

    Epochs are numbered from 1. In ``deep_carve`` mode, at the start of each
    epoch where :func:`carving_schedule` fires, pseudo-labels are regenerated
    from the current parameters and used from that epoch's first batch on.
    ``stop_after`` ends the run after that epoch, as an interruption would.
    """
    if net.num_classes != dataset.num_classes:
        raise ValueError(f"network predicts {net.num_classes} classes, dataset has {dataset.num_classes}")
    state = state or TrainState(rng=Rng(config.seed).spawn(1))
    run_dir = Path(config.run_dir) if config.run_dir else None
    dataset_hash = dataset.fingerprint()
    weak = weak_targets(dataset.train.weak_labels, dataset.num_classes, config.positive, config.negative)
    net.train()

    for epoch in range(state.epoch + 1, config.max_epochs + 1):
        carved = ""
        if state.carved_epoch == epoch:
            # resumed from a carve checkpoint: its pseudo-labels are this epoch's
            carved = state.carve_iteration
        elif config.loss == "deep_carve" and carving.carving_schedule(
                epoch, config.warmup_epochs, config.carve_period):
            c = state.carve_iteration + 1
            hist, pls = carving.carve(net, dataset, config.gamma, c, config.positive, config.negative)
            state.targets, state.carve_iteration, state.carved_epoch = pls.labels, c, epoch
            carved = c
            log.info("epoch %d: carving iteration %d", epoch, c)
            if run_dir is not None:
                carving.write_pseudo_labels_csv(run_dir / "pseudo_labels" / f"iter_{c:03d}.csv",
                                                pls, dataset.attributes)
                carving.write_histogram_csv(run_dir / "histograms" / f"iter_{c:03d}.csv",
                                            hist, dataset.attributes)
                save_train_checkpoint(run_dir / "checkpoints" / f"carve_{c:03d}.ckpt",
                                      net, state, config, dataset_hash)

        head = _head(config, state)
        if config.loss == "softmax":
            targets = None
        else:
            targets = weak if state.targets is None else state.targets
        lr = _learning_rate(config, epoch)
        total, seen = 0.0, 0
        for images, y in batch_iterator(dataset, "train", config.batch_size, state.rng, targets):
            logits, trace = forward(net, images, state.rng)
            loss, dlogits = head(logits, y)
            sgd_step(net, backward(net, trace, dlogits), state, config, lr)
            total += loss * len(images)
            seen += len(images)

        state.epoch = epoch
        if config.loss != "deep_carve":
            phase = "train"
        else:
            phase = "warmup" if state.targets is None else "carve"
        row = {"epoch": epoch, "phase": phase, "loss": total / seen,
               "val_precision": val_precision(net, dataset), "carve_iteration": carved}
        net.train()
        state.metrics.append(row)
        log.info("epoch %d %s loss=%.5f val=%s", epoch, phase, row["loss"], row["val_precision"])
        if run_dir is not None:
            write_metrics(run_dir / "metrics.csv", state.metrics)
            save_train_checkpoint(run_dir / "checkpoints" / "last.ckpt", net, state, config, dataset_hash)
        if stop_after is not None and epoch >= stop_after:
            return net, state.metrics

    if run_dir is not None:
        save_train_checkpoint(run_dir / "checkpoints" / "final.ckpt", net, state, config, dataset_hash)
    return net, state.metrics


def resume(checkpoint_path, dataset: WeakDataset, config: TrainConfig, stop_after: int | None = None):
    """Continue a run from a training checkpoint so the result equals an uninterrupted run."""
    net, state, _ = load_train_checkpoint(checkpoint_path, config, dataset)
    return train(dataset, net, config, state, stop_after=stop_after)
