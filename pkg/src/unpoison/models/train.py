"""Deterministic SGD training, checkpoints, and model-query operations."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..common import canonical_json, digest_bytes, rng
from ..data import Dataset, LabeledExample
from ..errors import InputError, TrainingDivergedError
from .arch import ArchSpec
from .network import Network, network_for


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError("learning rate must be positive")
        if self.epochs < 0:
            raise InputError("epochs must be non-negative")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "seed": self.seed}


@dataclass(frozen=True)
class Checkpoint:
    arch: ArchSpec
    params: np.ndarray  # flat float64
    layer_offsets: dict
    train_config_digest: str
    seed: int

    def digest(self) -> str:
        return digest_bytes(canonical_json(self.arch.to_dict()).encode(),
                            self.params.astype("<f8").tobytes())

    def with_params(self, params: np.ndarray) -> "Checkpoint":
        return replace(self, params=params)


def _train_digest(arch: ArchSpec, cfg: TrainConfig) -> str:
    return digest_bytes(canonical_json({"arch": arch.to_dict(),
                                        "train": cfg.to_dict()}).encode())


def _sgd(net: Network, params: np.ndarray, dataset: Dataset, cfg: TrainConfig,
         start_epoch: int = 0) -> np.ndarray:
    params = params.copy()
    velocity = np.zeros_like(params)
    shuffle = rng(cfg.seed, 0x5D)
    n = len(dataset)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = shuffle.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            positions = order[lo:lo + cfg.batch_size]
            images, labels = dataset.batch(positions)
            mean_loss, grad_sum = net.loss_and_grad_sum(params, images, labels)
            if not np.isfinite(mean_loss):
                raise TrainingDivergedError(epoch)
            grad = grad_sum / len(positions)
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * params
            velocity = cfg.momentum * velocity - cfg.learning_rate * grad
            params = params + velocity
    return params


def train(arch: ArchSpec, dataset: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Train from a seed-derived init; bit-identical for identical inputs."""
    if tuple(dataset.image_shape) != arch.input_shape:
        raise InputError(f"dataset images {dataset.image_shape} do not match "
                         f"architecture input {arch.input_shape}")
    net = network_for(arch)
    params = _sgd(net, net.init_params(cfg.seed), dataset, cfg)
    return Checkpoint(arch, params, dict(net.layer_offsets),
                      _train_digest(arch, cfg), cfg.seed)


def continue_training(ckpt: Checkpoint, dataset: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Resume SGD from an existing checkpoint (fine-tuning entry point)."""
    net = network_for(ckpt.arch)
    params = _sgd(net, ckpt.params, dataset, cfg)
    return replace(ckpt, params=params,
                   train_config_digest=_train_digest(ckpt.arch, cfg))


def loss_and_grad(ckpt: Checkpoint, example: LabeledExample):
    """Single-example loss and flat gradient (not batch-averaged)."""
    net = network_for(ckpt.arch)
    losses, stats = net.layer_stats(ckpt.params, example.image[None],
                                    np.array([example.label]))
    grad = np.zeros(net.param_count)
    for l, a, s in stats:
        start, _ = net.layer_offsets[l.name]
        if a.ndim == 3:  # conv stats carry a patch axis
            gw = np.einsum("bto,bti->oi", s, a)
            gb = s.sum(axis=(0, 1))
        else:
            gw = s.T @ a
            gb = s.sum(axis=0)
        grad[start:start + gw.size] = gw.ravel()
        grad[start + gw.size:start + gw.size + gb.size] = gb
    return float(losses[0]), grad


def logits(ckpt: Checkpoint, images: np.ndarray) -> np.ndarray:
    return network_for(ckpt.arch).logits(ckpt.params, images)


def predict(ckpt: Checkpoint, images: np.ndarray) -> np.ndarray:
    """Argmax class indices; ties resolve to the lowest class index."""
    return np.argmax(logits(ckpt, images), axis=1)


def predicted_label(ckpt: Checkpoint, example: LabeledExample) -> int:
    return int(predict(ckpt, example.image[None])[0])


def with_predicted_label(ckpt: Checkpoint, example: LabeledExample) -> LabeledExample:
    """Attach the model's own prediction as the example's label."""
    return LabeledExample(example.id, example.image, predicted_label(ckpt, example))


def evaluate_accuracy(ckpt: Checkpoint, dataset: Dataset,
                      batch_size: int = 512) -> float:
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        positions = np.arange(lo, min(lo + batch_size, len(dataset)))
        images, labels = dataset.batch(positions)
        correct += int((predict(ckpt, images) == labels).sum())
    return correct / len(dataset)


def activations(ckpt: Checkpoint, image: np.ndarray) -> np.ndarray:
    """Post-nonlinearity vector feeding the final dense head, one image."""
    return network_for(ckpt.arch).last_hidden(ckpt.params, image[None])[0]


def batch_activations(ckpt: Checkpoint, images: np.ndarray,
                      batch_size: int = 512) -> np.ndarray:
    net = network_for(ckpt.arch)
    parts = [net.last_hidden(ckpt.params, images[lo:lo + batch_size])
             for lo in range(0, len(images), batch_size)]
    return np.concatenate(parts, axis=0)


# -- persistence ----------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "unpoison-checkpoint-v1", "arch": ckpt.arch.to_dict(),
                "seed": ckpt.seed, "train_config_digest": ckpt.train_config_digest,
                "layer_offsets": {k: list(v) for k, v in ckpt.layer_offsets.items()},
                "digest": ckpt.digest()}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    ckpt.params.astype("<f8").tofile(directory / "params.f64")


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "unpoison-checkpoint-v1":
        raise InputError(f"not a checkpoint directory: {directory}")
    arch = ArchSpec.from_dict(manifest["arch"])
    params = np.fromfile(directory / "params.f64", dtype="<f8")
    ckpt = Checkpoint(arch, params,
                      {k: tuple(v) for k, v in manifest["layer_offsets"].items()},
                      manifest["train_config_digest"], manifest["seed"])
    if ckpt.digest() != manifest["digest"]:
        raise InputError("checkpoint digest mismatch; file corrupted")
    return ckpt
