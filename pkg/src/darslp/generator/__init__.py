from .losses import batch_channel_moments, gaussian_kl, kl_channel_loss, length_from_ratio, phase1_loss
from .model import GeneratorConfig, TextToLatent, sinusoidal_encoding
from .training import (GeneratorCheckpoint, generate, generate_latents, idle_pose_from, init_generator,
                       load_generator_checkpoint, predict_split, ratio_target, split_losses, train_generator)

__all__ = [
    "GeneratorCheckpoint", "GeneratorConfig", "TextToLatent", "batch_channel_moments", "gaussian_kl",
    "generate", "generate_latents", "idle_pose_from", "init_generator", "kl_channel_loss",
    "length_from_ratio", "load_generator_checkpoint", "phase1_loss", "predict_split", "ratio_target",
    "sinusoidal_encoding", "split_losses", "train_generator",
]
