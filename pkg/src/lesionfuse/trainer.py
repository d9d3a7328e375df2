"""Two-phase training: frozen-backbone head training, then full fine-tuning.

Phase 1 freezes the feature extractor and trains the head at the base
learning rate; phase 2 unfreezes everything and continues at the reduced
rate.  Within each phase the learning rate decays by ``plateau_factor``
after ``plateau_patience`` epochs without improvement of the monitored
validation quantity, and the phase stops early after
``early_stop_patience`` such epochs.  The checkpoint with the best monitor
value across both phases is returned.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .backbones import create_extractor, set_trainable
from .data import (
    ClinicalRecord,
    DatasetManifest,
    FoldAssignment,
    class_weights,
    encode_clinical,
)
from .evaluation import balanced_accuracy, confusion_matrix
from .fusion import FusedClassifier, FusionHead, HeadSpec
from .preprocess import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    AugmentPolicy,
    ColorConstancyConfig,
    augment,
    load_image,
    shades_of_gray,
    standardize,
)

LOG_EPS = 1e-12

MONITORS = ("val_loss", "val_bacc")


@dataclass
class TrainConfig:
    """Hyperparameters of the two-phase protocol."""

    phase1_epochs: int = 50
    phase2_epochs: int = 100
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    early_stop_patience: int = 15
    batch_size: int = 32
    seed: int = 0
    monitor: str = "val_loss"
    min_improvement: float = 1e-4

    def __post_init__(self) -> None:
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_phase2 > self.lr_phase1:
            raise ValueError("fine-tuning rate must not exceed the phase-1 rate")
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise ValueError("patience values must be positive")
        if not 0.0 < self.plateau_factor <= 1.0:
            raise ValueError("plateau_factor must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}")


@dataclass(frozen=True)
class EpochRecord:
    phase: int
    epoch: int
    train_loss: float
    val_loss: float
    val_bacc: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_monitor: float = math.nan
    best_phase: int = -1
    best_epoch: int = -1

    def monitor_values(self, monitor: str) -> list[float]:
        attr = {"val_loss": "val_loss", "val_bacc": "val_bacc"}[monitor]
        return [getattr(r, attr) for r in self.records]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "epoch", "train_loss", "val_loss", "val_bacc", "lr"])
            for r in self.records:
                writer.writerow([r.phase, r.epoch, f"{r.train_loss:.8f}",
                                 f"{r.val_loss:.8f}", f"{r.val_bacc:.8f}", f"{r.lr:.3e}"])
        return path


def weighted_cross_entropy(
    probabilities: torch.Tensor,
    labels: torch.Tensor | int,
    weights: torch.Tensor | np.ndarray | Sequence[float],
) -> torch.Tensor:
    """Class-weighted cross-entropy on probabilities.

    For a single sample returns -w_label * log(p_label + eps).  For a batch
    returns the weighted mean: per-sample losses summed, divided by the sum
    of the applied weights.
    """
    if not isinstance(weights, torch.Tensor):
        weights = torch.as_tensor(np.asarray(weights, dtype=np.float64))
    weights = weights.to(probabilities.dtype)
    if probabilities.dim() == 1:
        label = int(labels)
        w = weights[label]
        return -w * torch.log(probabilities[label] + LOG_EPS)
    labels = torch.as_tensor(labels, dtype=torch.long, device=probabilities.device)
    picked = probabilities.gather(1, labels.unsqueeze(1)).squeeze(1)
    w = weights[labels]
    return (-w * torch.log(picked + LOG_EPS)).sum() / w.sum()


class LesionDataset(Dataset):
    """Images + encoded clinical vectors + integer labels for a set of lesions.

    Raw decoded images are cached in memory; when no augmentation policy is
    set the standardized tensor is cached too.  Augmentation draws its RNG
    from (base_seed, epoch, index) so parallel workers stay reproducible.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        lesion_ids: Sequence[str],
        label_order: Sequence[str],
        *,
        side: int = 224,
        mean: tuple[float, float, float] = IMAGENET_MEAN,
        std: tuple[float, float, float] = IMAGENET_STD,
        age_scale: float = 100.0,
        augment_policy: Optional[AugmentPolicy] = None,
        color_constancy: Optional[ColorConstancyConfig] = None,
        base_seed: int = 0,
    ):
        index = manifest.by_id
        self.records: list[ClinicalRecord] = [index[i] for i in lesion_ids]
        self.paths = [manifest.image_file(r) for r in self.records]
        self.label_index = {label: i for i, label in enumerate(label_order)}
        self.side = side
        self.mean = mean
        self.std = std
        self.age_scale = age_scale
        self.policy = augment_policy if (augment_policy and augment_policy.any_enabled) else None
        self.color_constancy = color_constancy
        self.base_seed = base_seed
        self.epoch = 0
        self._raw_cache: dict[int, np.ndarray] = {}
        self._std_cache: dict[int, torch.Tensor] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def _raw(self, idx: int) -> np.ndarray:
        if idx not in self._raw_cache:
            image = load_image(self.paths[idx])
            if self.color_constancy is not None:
                image = shades_of_gray(image, self.color_constancy)
            self._raw_cache[idx] = image
        return self._raw_cache[idx]

    def _image_tensor(self, idx: int) -> torch.Tensor:
        if self.policy is None and idx in self._std_cache:
            return self._std_cache[idx]
        image = self._raw(idx)
        if self.policy is not None:
            rng = np.random.default_rng((self.base_seed, self.epoch, idx))
            image = augment(image, self.policy, rng)
        arr = standardize(image, self.side, self.mean, self.std)
        tensor = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()
        if self.policy is None:
            self._std_cache[idx] = tensor
        return tensor

    def __getitem__(self, idx: int):
        record = self.records[idx]
        image = self._image_tensor(idx)
        clinical = torch.from_numpy(encode_clinical(record, self.age_scale)).float()
        label = self.label_index[record.diagnosis]
        return image, clinical, label


def _forward(model: FusedClassifier, images, clinical) -> torch.Tensor:
    if model.head.spec.uses_clinical:
        return model(images, clinical)
    return model(images)


@torch.no_grad()
def evaluate_model(
    model: FusedClassifier, loader: DataLoader, label_order: Sequence[str]
) -> tuple[np.ndarray, list[str]]:
    """Predicted probabilities and true labels over a loader, in eval mode."""
    model.eval()
    probs, trues = [], []
    for images, clinical, labels in loader:
        out = _forward(model, images, clinical)
        probs.append(out.double().numpy())
        trues.extend(label_order[i] for i in labels.tolist())
    return np.concatenate(probs, axis=0), trues


class _PhaseController:
    """Plateau decay + early stop driven by one monitored quantity."""

    def __init__(self, config: TrainConfig, maximize: bool):
        self.config = config
        self.maximize = maximize
        self.best = -math.inf if maximize else math.inf
        self.plateau_count = 0
        self.stall_count = 0

    def improved(self, value: float) -> bool:
        delta = value - self.best if self.maximize else self.best - value
        return delta > self.config.min_improvement

    def update(self, value: float) -> tuple[bool, bool]:
        """Returns (reduce_lr_now, stop_phase_now)."""
        if self.improved(value):
            self.best = value
            self.plateau_count = 0
            self.stall_count = 0
            return False, False
        self.plateau_count += 1
        self.stall_count += 1
        reduce_lr = self.plateau_count >= self.config.plateau_patience
        if reduce_lr:
            self.plateau_count = 0
        return reduce_lr, self.stall_count >= self.config.early_stop_patience


def train_two_phase(
    model: FusedClassifier,
    manifest: DatasetManifest,
    folds: FoldAssignment,
    fold_index: int,
    config: TrainConfig,
    *,
    side: int = 224,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
    age_scale: float = 100.0,
    augment_policy: Optional[AugmentPolicy] = None,
    color_constancy: Optional[ColorConstancyConfig] = None,
) -> tuple[FusedClassifier, TrainHistory]:
    """Run both training phases on one fold and return the best checkpoint.

    The fold's members are the validation slice; everything else trains.
    Class weights come from the training slice and must cover every label
    present in the manifest.  Deterministic given the config seed (up to
    the numeric nondeterminism of the compute backend).
    """
    label_order = manifest.labels_present()
    if model.head.spec.n_classes != len(label_order):
        raise ValueError(
            f"head predicts {model.head.spec.n_classes} classes but the "
            f"manifest carries {len(label_order)}"
        )
    val_ids = folds.members(fold_index)
    train_ids = folds.rest(fold_index)
    if not train_ids or not val_ids:
        raise ValueError("fold split produced an empty slice")
    weights = class_weights(manifest.subset(train_ids), labels=label_order)
    weight_arr = weights.as_array(label_order)

    torch.manual_seed(config.seed)
    train_set = LesionDataset(
        manifest, train_ids, label_order, side=side, mean=mean, std=std,
        age_scale=age_scale, augment_policy=augment_policy,
        color_constancy=color_constancy, base_seed=config.seed,
    )
    val_set = LesionDataset(
        manifest, val_ids, label_order, side=side, mean=mean, std=std,
        age_scale=age_scale, augment_policy=None,
        color_constancy=color_constancy, base_seed=config.seed,
    )
    loader_rng = torch.Generator().manual_seed(config.seed)
    # a trailing batch of one sample breaks batch-norm statistics in train mode
    drop_last = len(train_set) % config.batch_size == 1
    train_loader = DataLoader(
        train_set, batch_size=config.batch_size, shuffle=True,
        generator=loader_rng, drop_last=drop_last,
    )
    val_loader = DataLoader(val_set, batch_size=config.batch_size, shuffle=False)

    maximize = config.monitor == "val_bacc"
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    best_value = -math.inf if maximize else math.inf

    global_epoch = 0
    for phase, (epochs, lr) in enumerate(
        [(config.phase1_epochs, config.lr_phase1),
         (config.phase2_epochs, config.lr_phase2)], start=1
    ):
        if epochs == 0:
            continue
        set_trainable(model.extractor, phase == 2)
        optimizer = torch.optim.Adam(
            (p for p in model.parameters() if p.requires_grad), lr=lr
        )
        controller = _PhaseController(config, maximize)
        for epoch in range(1, epochs + 1):
            global_epoch += 1
            train_set.set_epoch(global_epoch)
            model.train()
            loss_num = 0.0
            loss_den = 0.0
            for images, clinical, labels in train_loader:
                probs = _forward(model, images, clinical)
                loss = weighted_cross_entropy(probs, labels, weight_arr)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite training loss at phase {phase} epoch {epoch}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                batch_w = float(weight_arr[labels.numpy()].sum())
                loss_num += float(loss.detach()) * batch_w
                loss_den += batch_w
            train_loss = loss_num / loss_den

            val_probs, val_true = evaluate_model(model, val_loader, label_order)
            picked = val_probs[np.arange(len(val_true)),
                               [label_order.index(t) for t in val_true]]
            w = weight_arr[[label_order.index(t) for t in val_true]]
            val_loss = float((-w * np.log(picked + LOG_EPS)).sum() / w.sum())
            val_pred = [label_order[i] for i in val_probs.argmax(axis=1)]
            val_bacc = balanced_accuracy(confusion_matrix(val_true, val_pred, label_order))

            lr_now = optimizer.param_groups[0]["lr"]
            history.records.append(EpochRecord(
                phase=phase, epoch=epoch, train_loss=train_loss,
                val_loss=val_loss, val_bacc=val_bacc, lr=lr_now,
            ))

            value = val_bacc if maximize else val_loss
            better = value > best_value if maximize else value < best_value
            if better:
                best_value = value
                best_state = copy.deepcopy(model.state_dict())
                history.best_monitor = value
                history.best_phase = phase
                history.best_epoch = epoch
            reduce_lr, stop = controller.update(value)
            if reduce_lr:
                for group in optimizer.param_groups:
                    group["lr"] *= config.plateau_factor
            if stop:
                break

    model.load_state_dict(best_state)
    return model, history


def save_checkpoint(
    path,
    model: FusedClassifier,
    *,
    backbone: str,
    train_config: TrainConfig,
    fold_index: int,
    fold_count: int,
    fold_seed: int,
    group_by_patient: bool,
    c_f: float,
    side: int,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
    age_scale: float = 100.0,
) -> Path:
    """Self-describing checkpoint: parameters plus every shape/seed needed to rebuild."""
    path = Path(path)
    payload = {
        "state_dict": model.state_dict(),
        "head_spec": model.head.spec.to_dict(),
        "backbone": backbone,
        "train_config": vars(train_config).copy(),
        "fold": {
            "index": fold_index,
            "count": fold_count,
            "seed": fold_seed,
            "group_by_patient": group_by_patient,
        },
        "c_f": c_f,
        "preprocess": {
            "side": side, "mean": list(mean), "std": list(std), "age_scale": age_scale,
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[FusedClassifier, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    spec = HeadSpec.from_dict(payload["head_spec"])
    extractor = create_extractor(payload["backbone"], pretrained=False)
    model = FusedClassifier(extractor, FusionHead(spec))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    meta["train_config"] = TrainConfig(**payload["train_config"])
    return model, meta
