"""Small classifier family: architectures, training, gradients, activations."""

from .arch import ArchSpec, REGISTRY, build_arch, cnn_s, logistic, mlp1
from .network import Network, network_for
from .train import (Checkpoint, TrainConfig, activations, batch_activations,
                    continue_training, evaluate_accuracy, load_checkpoint,
                    logits, loss_and_grad, predict, predicted_label,
                    save_checkpoint, train, with_predicted_label)

__all__ = [
    "ArchSpec", "REGISTRY", "build_arch", "cnn_s", "logistic", "mlp1",
    "Network", "network_for", "Checkpoint", "TrainConfig", "activations",
    "batch_activations", "continue_training", "evaluate_accuracy",
    "load_checkpoint", "logits", "loss_and_grad", "predict",
    "predicted_label", "save_checkpoint", "train", "with_predicted_label",
]
