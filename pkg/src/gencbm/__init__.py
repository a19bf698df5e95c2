"""Generative concept bottleneck on a synthetic layered-latent renderer.

Modules, coarse to fine:

- ``renderer``: latent layout, the lesion renderer and ground-truth labels
- ``inversion``: reconstruction loss, per-image inversion, ridge encoder
- ``bottleneck``: layer-wise linear concept bottleneck and concept directions
- ``grounding``: counterfactual difference maps and majority-vote masks
- ``evaluation``: metrics and end-to-end evaluation runs
- ``dataset``, ``formats``, ``store``, ``config``, ``cli``: files and plumbing
"""

from .bottleneck import (
    BottleneckModel,
    TrainConfig,
    concept_direction,
    counterfactual_logit_curve,
    forward,
    init_model,
    predict_concepts,
    task_rule,
    train,
)
from .grounding import MagnitudeSpectrum, ground_concept
from .inversion import LossWeights, encode, fit_regression_encoder, invert_optimize, reconstruction_loss
from .renderer import DEFAULT_VOCAB, ConceptVocab, LatentSpec, render, sample_latent, true_concepts

__all__ = [
    "BottleneckModel",
    "ConceptVocab",
    "DEFAULT_VOCAB",
    "LatentSpec",
    "LossWeights",
    "MagnitudeSpectrum",
    "TrainConfig",
    "concept_direction",
    "counterfactual_logit_curve",
    "encode",
    "fit_regression_encoder",
    "forward",
    "ground_concept",
    "init_model",
    "invert_optimize",
    "predict_concepts",
    "reconstruction_loss",
    "render",
    "sample_latent",
    "task_rule",
    "train",
    "true_concepts",
]
