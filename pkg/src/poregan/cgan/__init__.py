"""Multi-conditional GAN: porosity + depth conditioned image synthesis."""
from .losses import discriminator_loss, generator_loss
from .networks import (ARCHITECTURES, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
                       assemble_discriminator_input, assemble_generator_input, count_parameters,
                       parameter_count, preset, read_condition)
from .training import (ConditionalGAN, GanTrainConfig, GeneratedBatch, TrainingLog, lr_schedule,
                       train)

__all__ = [
    "ARCHITECTURES", "ConditionalGAN", "Discriminator", "DiscriminatorSpec", "GanTrainConfig",
    "GeneratedBatch", "Generator", "GeneratorSpec", "TrainingLog", "assemble_discriminator_input",
    "assemble_generator_input", "count_parameters", "discriminator_loss", "generator_loss",
    "lr_schedule", "parameter_count", "preset", "read_condition", "train",
]
