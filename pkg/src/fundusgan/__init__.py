"""Unpaired fundus-image enhancement with a transformer-encoder CycleGAN, in numpy."""

from .autodiff import Tensor, no_grad
from .data import DegradationRecipe, UnpairedSampler, read_ppm, write_ppm
from .losses import LossWeights
from .metrics import QualityReport, psnr, ssim
from .models import CycleGAN, Discriminator, GeneratorCnnBaseline, GeneratorVit
from .trainer import Checkpoint, CycleGANTrainer, Enhancer, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "DegradationRecipe", "UnpairedSampler", "read_ppm", "write_ppm",
    "LossWeights", "QualityReport", "psnr", "ssim", "CycleGAN", "Discriminator",
    "GeneratorCnnBaseline", "GeneratorVit", "Checkpoint", "CycleGANTrainer", "Enhancer",
    "TrainConfig", "train",
]
