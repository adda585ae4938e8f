"""Auxiliary heads: attribute classifiers, cross-modal substitution, next-frame prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor

NUM_COLORS = 12
NUM_TYPES = 10


def _split_logits(logits: Tensor, n_colors: int) -> tuple[Tensor, Tensor]:
    return logits[..., :n_colors], logits[..., n_colors:]


class TextClassifier(nn.Module):
    """One linear layer over the CLS feature, split into color and type logits."""

    def __init__(self, e: int, rng, n_colors: int = NUM_COLORS, n_types: int = NUM_TYPES):
        super().__init__()
        self.linear = nn.Linear(e, n_colors + n_types, rng, gain=1.0)
        self.n_colors = n_colors

    def forward(self, fn_cls) -> tuple[Tensor, Tensor]:
        return _split_logits(self.linear(fn_cls), self.n_colors)


def box_pool(fi, b) -> Tensor:
    """Mean of FI over the cells where the box mask is 1: (N, c, h, w), (N, 1, h, w) -> (N, c)."""
    b = T.as_tensor(b)
    area = b.data.sum(axis=(1, 2, 3))
    if np.any(area <= 0):
        raise ValueError("empty box mask")
    return T.tsum(fi * b, axis=(2, 3)) * Tensor(1.0 / area[:, None], dtype=b.data.dtype)


class ImageClassifier(nn.Module):
    """Box-pooled image feature -> two-layer MLP -> color and type logits."""

    def __init__(self, c: int, rng, n_colors: int = NUM_COLORS, n_types: int = NUM_TYPES):
        super().__init__()
        self.fc1 = nn.Linear(c, c, rng)
        self.fc2 = nn.Linear(c, n_colors + n_types, rng, gain=1.0)
        self.n_colors = n_colors

    def forward(self, fi, b) -> tuple[Tensor, Tensor, Tensor]:
        pooled = box_pool(fi, b)
        c_i, t_i = _split_logits(self.fc2(T.relu(self.fc1(pooled))), self.n_colors)
        return c_i, t_i, pooled


@dataclass
class SubstitutionBundle:
    fi_gt: Tensor  # (N, c) spatial mean of FI
    fn_gt: Tensor  # (N, e) token mean of FN
    fi_g: Tensor  # (N, c) generated from language
    fn_g: Tensor  # (N, e) generated from image + box


class Substitution(nn.Module):
    def __init__(self, e: int, c: int, rng):
        super().__init__()
        self.mlp1 = nn.Linear(e, c, rng)
        self.mlp2 = nn.Linear(c, c, rng, gain=1.0)
        self.conv1 = nn.Conv2d(c + 1, c, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(c, e, 3, rng, padding=1, gain=1.0)

    def image_from_text(self, fn) -> Tensor:
        return self.mlp2(T.leaky_relu(self.mlp1(T.mean(fn, axis=1))))

    def text_from_image(self, fi, b) -> Tensor:
        x = T.concat([fi, T.as_tensor(b)], axis=1)
        return nn.global_mean(self.conv2(T.relu(self.conv1(x))))

    def forward(self, fn, fi, b) -> SubstitutionBundle:
        return SubstitutionBundle(
            fi_gt=nn.global_mean(fi),
            fn_gt=T.mean(fn, axis=1),
            fi_g=self.image_from_text(fn),
            fn_g=self.text_from_image(fi, b),
        )


class FuturePredictor(nn.Module):
    """Stack of 3x3 convs c -> c/4 -> c/16 -> 3 predicting the next frame at feature resolution."""

    def __init__(self, c: int, rng):
        super().__init__()
        c4, c16 = max(c // 4, 1), max(c // 16, 1)
        self.conv1 = nn.Conv2d(c, c4, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(c4, c16, 3, rng, padding=1)
        self.conv3 = nn.Conv2d(c16, 3, 3, rng, padding=1, gain=1.0)

    def forward(self, fi) -> Tensor:
        return self.conv3(T.relu(self.conv2(T.relu(self.conv1(fi)))))
