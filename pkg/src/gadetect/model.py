"""Binary fundus classifiers: construction, training with early stopping, inference."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import Task
from .errors import ConfigError, DivergenceError, InputError, StorageError, TrainingError
from .folds import AugmentConfig, augment

log = logging.getLogger(__name__)

PROFILES = ("paper", "tiny")


class PretrainedWeightsUnavailable(ConfigError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    profile: str = "tiny"
    input_size: int = 128
    pretrained: bool = False
    task: str = "ga"
    threshold: float = 0.5
    freeze_depth: int = 0
    weights_path: Optional[str] = None  # local backbone weights for the paper profile

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown model profile {self.profile!r}; expected one of {PROFILES}")
        if self.profile == "paper" and self.input_size != 512:
            raise ConfigError("the paper profile takes 512 px inputs")
        if self.profile == "tiny" and self.input_size not in (16, 64, 128):
            raise ConfigError("the tiny profile takes 64 or 128 px inputs (16 for gradient checks)")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        Task.parse(self.task)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience_epochs: int = 5
    seed: int = 0
    pos_weight: Optional[float] = None

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.max_epochs > 0 and self.patience_epochs > 0):
            raise ConfigError(f"training settings must be positive: {self}")
        if self.patience_epochs > self.max_epochs:
            raise ConfigError("patience_epochs cannot exceed max_epochs")


# ---------------------------------------------------------------------------
# networks


def _block(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyNet(nn.Module):
    """Small CNN for desk-scale runs; global max+mean pooling keeps small lesions visible."""

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            _block(3, 16, k=5, stride=2),
            nn.MaxPool2d(2),
            _block(16, 32),
            nn.MaxPool2d(2),
            _block(32, 48),
            nn.MaxPool2d(2),
            _block(48, 64),
        )
        self.head = nn.Linear(128, 1)

    def forward(self, x):
        f = self.features(x)
        pooled = torch.cat([f.amax(dim=(2, 3)), f.mean(dim=(2, 3))], dim=1)
        return self.head(pooled).squeeze(1)


def _inception(cfg: ModelConfig) -> nn.Module:
    from torchvision.models import Inception_V3_Weights, inception_v3

    if cfg.pretrained:
        try:
            if cfg.weights_path:
                net = inception_v3(weights=None, aux_logits=True, init_weights=False)
                net.load_state_dict(torch.load(cfg.weights_path, map_location="cpu"))
            else:
                net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download or file failure
            raise PretrainedWeightsUnavailable(
                f"ImageNet weights for the paper profile are unavailable: {exc}"
            ) from exc
    else:
        net = inception_v3(weights=None, aux_logits=True, init_weights=True)
    net.aux_logits = False
    net.AuxLogits = None
    net.transform_input = False
    net.fc = nn.Linear(net.fc.in_features, 1)
    return net


class InceptionBinary(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = _inception(cfg)
        self.head = self.backbone.fc

    def forward(self, x):
        return self.backbone(x).squeeze(1)


class Classifier(nn.Module):
    """Maps N x 3 x H x W raw intensities (0..255) to one logit per image."""

    def __init__(self, net: nn.Module, config: ModelConfig):
        super().__init__()
        self.net = net
        self.config = config

    @property
    def head(self) -> nn.Linear:
        return self.net.head

    def forward(self, x):
        return self.net((x - 128.0) / 64.0)


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> Classifier:
    if seed is not None:
        torch.manual_seed(seed)
    if cfg.profile == "tiny":
        net = TinyNet()
        blocks = list(net.features)
    else:
        net = InceptionBinary(cfg)
        blocks = [m for name, m in net.backbone.named_children() if name != "fc"]
    for block in blocks[: cfg.freeze_depth]:
        for p in block.parameters():
            p.requires_grad_(False)
    return Classifier(net, cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# artifacts


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    dev_loss: list = field(default_factory=list)
    dev_accuracy: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "dev_loss", "dev_acc"])
            for i, row in enumerate(zip(self.train_loss, self.dev_loss, self.dev_accuracy), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])
        return path

    @classmethod
    def read_csv(cls, path, stopped_epoch=None, best_epoch=None) -> "TrainingHistory":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.train_loss.append(float(row["train_loss"]))
                h.dev_loss.append(float(row["dev_loss"]))
                h.dev_accuracy.append(float(row["dev_acc"]))
        h.stopped_epoch = stopped_epoch if stopped_epoch is not None else len(h.dev_loss)
        if best_epoch is None and h.dev_loss:
            best_epoch = int(np.argmin(h.dev_loss)) + 1
        h.best_epoch = best_epoch or 0
        return h


@dataclass
class ModelArtifact:
    model: Classifier
    model_config: ModelConfig
    training_config: Optional[TrainingConfig]
    preprocess_fingerprint: str
    training_fingerprint: str = ""
    history: Optional[TrainingHistory] = None

    @property
    def fingerprint(self) -> str:
        return _hash([self.preprocess_fingerprint, self.training_fingerprint, self.model_config])

    def save(self, directory) -> Path:
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            torch.save(self.model.net.state_dict(), directory / "weights.pt")
            cfg = {
                "model_config": asdict(self.model_config),
                "training_config": None if self.training_config is None else asdict(self.training_config),
                "preprocess_fingerprint": self.preprocess_fingerprint,
                "training_fingerprint": self.training_fingerprint,
            }
            if self.history is not None:
                cfg["stopped_epoch"] = self.history.stopped_epoch
                cfg["best_epoch"] = self.history.best_epoch
                self.history.write_csv(directory / "history.csv")
            (directory / "config.json").write_text(json.dumps(cfg, indent=2))
        except OSError as exc:
            raise StorageError(f"cannot save artifact to {directory}: {exc}") from exc
        return directory

    @classmethod
    def load(cls, directory) -> "ModelArtifact":
        directory = Path(directory)
        try:
            cfg = json.loads((directory / "config.json").read_text())
        except OSError as exc:
            raise StorageError(f"cannot read artifact {directory}: {exc}") from exc
        mcfg = ModelConfig(**{**cfg["model_config"], "pretrained": False})
        model = build_model(mcfg)
        model.net.load_state_dict(torch.load(directory / "weights.pt", map_location="cpu"))
        model.eval()
        tcfg = cfg.get("training_config")
        history = None
        if (directory / "history.csv").exists():
            history = TrainingHistory.read_csv(
                directory / "history.csv", cfg.get("stopped_epoch"), cfg.get("best_epoch")
            )
        return cls(
            model=model,
            model_config=ModelConfig(**cfg["model_config"]),
            training_config=None if tcfg is None else TrainingConfig(**tcfg),
            preprocess_fingerprint=cfg["preprocess_fingerprint"],
            training_fingerprint=cfg.get("training_fingerprint", ""),
            history=history,
        )


# ---------------------------------------------------------------------------
# training


class EarlyStopping:
    """Track dev loss; signal a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, dev_loss: float) -> bool:
        """Record one epoch; return True when training should stop."""
        self.epoch += 1
        if dev_loss < self.best_loss:
            self.best_loss = dev_loss
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x 3 array -> float32 N x 3 x H x W tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InputError(f"expected N x H x W x 3 images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)


@torch.no_grad()
def _evaluate(model, images, labels, batch_size, threshold):
    model.eval()
    losses, correct = 0.0, 0
    for i in range(0, len(images), batch_size):
        x = to_tensor(images[i : i + batch_size])
        y = torch.as_tensor(labels[i : i + batch_size], dtype=torch.float32)
        logits = model(x)
        losses += F.binary_cross_entropy_with_logits(logits, y, reduction="sum").item()
        correct += int(((torch.sigmoid(logits) >= threshold) == (y > 0.5)).sum())
    return losses / len(images), correct / len(images)


def train(
    model: Classifier,
    train_set,
    dev_set,
    cfg: TrainingConfig = TrainingConfig(),
    *,
    preprocess_fingerprint: str,
    augment_config: Optional[AugmentConfig] = None,
    fold_seed: int = 0,
    on_epoch=None,
):
    """Fit ``model`` with Adam on minibatches and early stopping on dev loss.

    ``train_set`` and ``dev_set`` are ``(images, labels)`` pairs with images as
    N x H x W x 3 arrays. The returned artifact holds the weights of the epoch
    with the lowest dev loss.
    """
    x_train, y_train = np.asarray(train_set[0]), np.asarray(train_set[1]).astype(np.float32)
    x_dev, y_dev = np.asarray(dev_set[0]), np.asarray(dev_set[1]).astype(np.float32)
    for name, y in (("train", y_train), ("dev", y_dev)):
        if y.size == 0:
            raise TrainingError(f"{name} set is empty")
        if np.unique(y).size < 2:
            raise TrainingError(f"{name} set contains a single class")

    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, fold_seed, 1])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    pos_weight = None if cfg.pos_weight is None else torch.tensor(cfg.pos_weight)
    threshold = model.config.threshold

    history = TrainingHistory()
    stopper = EarlyStopping(cfg.patience_epochs)
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = order_rng.permutation(len(x_train))
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            batch = x_train[idx]
            if augment_config is not None:
                batch = np.stack([augment(im, aug_rng, augment_config) for im in batch])
            x = to_tensor(batch)
            y = torch.from_numpy(y_train[idx])
            logits = model(x)
            loss = F.binary_cross_entropy_with_logits(logits, y, pos_weight=pos_weight)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        train_loss = total / max(seen, 1)
        dev_loss, dev_acc = _evaluate(model, x_dev, y_dev, 128, threshold)
        if not math.isfinite(dev_loss):
            raise DivergenceError(epoch, dev_loss)
        history.train_loss.append(train_loss)
        history.dev_loss.append(dev_loss)
        history.dev_accuracy.append(dev_acc)
        stop = stopper.update(dev_loss)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        log.info("epoch %d train_loss %.4f dev_loss %.4f dev_acc %.4f", epoch, train_loss, dev_loss, dev_acc)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, dev_loss, dev_acc)
        if stop:
            break
    history.stopped_epoch = stopper.epoch
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    artifact = ModelArtifact(
        model=model,
        model_config=model.config,
        training_config=cfg,
        preprocess_fingerprint=preprocess_fingerprint,
        training_fingerprint=_hash(
            [asdict(cfg), fold_seed, None if augment_config is None else asdict(augment_config)]
        ),
        history=history,
    )
    return artifact, history


@torch.no_grad()
def predict(artifact: ModelArtifact, images, *, fingerprint: str, batch_size: int = 64) -> np.ndarray:
    """Positive-class probabilities for preprocessed images.

    ``fingerprint`` is the preprocessing fingerprint the images were made with;
    it must match the one the model was trained on.
    """
    if fingerprint != artifact.preprocess_fingerprint:
        raise InputError(
            f"preprocessing fingerprint {fingerprint} does not match the model's "
            f"{artifact.preprocess_fingerprint}"
        )
    model = artifact.model
    model.eval()
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    size = artifact.model_config.input_size
    if arr.shape[1:3] != (size, size):
        raise InputError(f"model expects {size}x{size} inputs, got {arr.shape[1:3]}")
    out = []
    for i in range(0, len(arr), batch_size):
        out.append(torch.sigmoid(model(to_tensor(arr[i : i + batch_size]))).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)
