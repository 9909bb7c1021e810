"""Adversarial losses on discriminator scores.

The public functions take probabilities (post-sigmoid) and clamp them away
from 0 and 1. Training uses the ``*_from_logits`` forms, which compute the
same quantities without the clamp.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..core import ValidationError

SCORE_CLAMP = 1e-7


def _scores(x):
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)) if not torch.is_tensor(x) else x
    if t.numel() == 0:
        raise ValidationError("empty score batch")
    return t.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def discriminator_loss(real_scores, fake_scores) -> float:
    """``-mean(log D(real)) - mean(log(1 - D(fake)))``."""
    r, f = _scores(real_scores), _scores(fake_scores)
    return float(-torch.log(r).mean() - torch.log1p(-f).mean())


def generator_loss(fake_scores) -> float:
    """Non-saturating generator loss ``-mean(log D(G(z)))``."""
    return float(-torch.log(_scores(fake_scores)).mean())


def discriminator_loss_from_logits(real_logits, fake_logits):
    return (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
            + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))


def generator_loss_from_logits(fake_logits):
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
