"""Language and image encoders.

The text encoder is a small post-norm transformer whose CLS row summarizes
the sentence; the image encoder is a conv net whose spatial reductions stop
once ``downsample_factor`` is reached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    l: int = 16
    e: int = 64
    c: int = 64
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    image_size: int = 96
    downsample_factor: int = 8
    vocab_size: int = 512
    mask_width: int = 32
    num_stages: int = 6

    def __post_init__(self):
        if self.e != self.c:
            raise ValueError(f"text width e={self.e} must equal image channels c={self.c}")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        k = int(round(math.log2(self.downsample_factor)))
        if 2**k != self.downsample_factor or k < 1:
            raise ValueError("downsample_factor must be a power of two >= 2")
        if self.num_stages <= k:
            raise ValueError("num_stages must exceed the number of strided stages")
        if self.l < 2:
            raise ValueError("l must be at least 2")

    @property
    def feature_size(self) -> int:
        return -(-self.image_size // self.downsample_factor)

    def override(self, **kwargs) -> EncoderConfig:
        known = {f.name for f in fields(self)}
        return replace(self, **{k: v for k, v in kwargs.items() if k in known})


PRESETS = {
    "desk": EncoderConfig(),
    "paper": EncoderConfig(l=30, e=2048, c=2048, d_model=256, num_heads=4, num_layers=12,
                           image_size=384, downsample_factor=8, mask_width=1024),
}


# --------------------------------------------------------------------------
# text


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int, rng):
        super().__init__()
        self.q = nn.Linear(d_model, d_model, rng, gain=1.0)
        self.k = nn.Linear(d_model, d_model, rng, gain=1.0)
        self.v = nn.Linear(d_model, d_model, rng, gain=1.0)
        self.out = nn.Linear(d_model, d_model, rng, gain=1.0)
        self.num_heads = num_heads

    def _split(self, x, n, l):
        return T.transpose(T.reshape(x, (n, l, self.num_heads, -1)), (0, 2, 1, 3))

    def forward(self, x, key_bias):
        n, l, d = x.shape
        dh = d // self.num_heads
        q, k, v = (self._split(f(x), n, l) for f in (self.q, self.k, self.v))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + key_bias
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        return self.out(T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, l, d)))


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, num_heads: int, rng):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, num_heads, rng)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, 2 * d_model, rng)
        self.ff2 = nn.Linear(2 * d_model, d_model, rng, gain=1.0)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x, key_bias):
        x = self.norm1(x + self.attn(x, key_bias))
        return self.norm2(x + self.ff2(T.relu(self.ff1(x))))


class TextEncoder(nn.Module):
    """Token ids (N, l) -> language features FN (N, l, e)."""

    def __init__(self, config: EncoderConfig, rng):
        super().__init__()
        d = config.d_model
        self.config = config
        self.token_embedding = nn.Parameter(rng.normal(0.0, 1.0, size=(config.vocab_size, d)))
        self.position_embedding = nn.Parameter(rng.normal(0.0, 1.0, size=(config.l, d)))
        self.embed_norm = nn.LayerNorm(d)
        self.blocks = [EncoderBlock(d, config.num_heads, rng) for _ in range(config.num_layers)]
        self.proj = nn.Linear(d, config.e, rng, gain=1.0)

    def forward(self, ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids, attention_mask = ids[None], np.asarray(attention_mask)[None]
        n, l = ids.shape
        if l != self.config.l:
            raise ValueError(f"expected {self.config.l} tokens, got {l}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IndexError(f"token id outside vocabulary of size {self.config.vocab_size}")
        dtype = self.token_embedding.data.dtype
        one_hot = np.zeros((n, l, self.config.vocab_size), dtype=dtype)
        np.put_along_axis(one_hot, ids[..., None], 1.0, axis=-1)
        x = T.matmul(Tensor(one_hot, dtype=dtype), self.token_embedding) + self.position_embedding
        x = self.embed_norm(x)
        key_bias = Tensor(((np.asarray(attention_mask) - 1) * 1e9).reshape(n, 1, 1, l), dtype=dtype)
        for block in self.blocks:
            x = block(x, key_bias)
        return self.proj(x)


def cls_feature(fn: Tensor) -> Tensor:
    """The CLS row of FN: (N, l, e) -> (N, e)."""
    return fn[:, 0, :]


# --------------------------------------------------------------------------
# image


class ConvBNReLU(nn.Module):
    def __init__(self, cin: int, cout: int, rng, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class ResidualStage(nn.Module):
    def __init__(self, channels: int, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, rng, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        h = T.relu(self.bn1(self.conv1(x)))
        return T.relu(x + self.bn2(self.conv2(h)))


class ImageEncoder(nn.Module):
    """Images (N, 3, H, W) in [0, 1] -> image features FI (N, c, H/f, W/f).

    Strided stages halve the resolution until ``downsample_factor`` is
    reached; every later stage keeps stride 1.
    """

    def __init__(self, config: EncoderConfig, rng):
        super().__init__()
        self.config = config
        k = int(round(math.log2(config.downsample_factor)))
        widths = [max(config.c >> (k - 1 - s), 4) for s in range(k)]
        self.strided = []
        cin = 3
        for w in widths:
            self.strided.append(ConvBNReLU(cin, w, rng, stride=2))
            cin = w
        self.residual = [ResidualStage(config.c, rng) for _ in range(config.num_stages - k)]

    def forward(self, images) -> Tensor:
        images = T.as_tensor(images)
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        size = self.config.image_size
        if images.shape[1] != 3 or images.shape[2:] != (size, size):
            raise ValueError(f"expected images of shape (3, {size}, {size}), got {images.shape[1:]}")
        x = images
        for stage in self.strided:
            x = stage(x)
        for stage in self.residual:
            x = stage(x)
        return x
