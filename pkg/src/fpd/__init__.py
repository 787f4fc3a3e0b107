"""Feature-pyramid denoising networks on a small numpy autodiff engine."""

from .arch import FPDNetwork, NetConfig, build_network, fpd_forward
from .attacks import AttackConfig, attack, robust_accuracy, transfer_attack
from .training import TrainConfig, adversarial_train, train

__all__ = ["AttackConfig", "FPDNetwork", "NetConfig", "TrainConfig", "adversarial_train",
           "attack", "build_network", "fpd_forward", "robust_accuracy", "train",
           "transfer_attack"]
__version__ = "0.1.0"
