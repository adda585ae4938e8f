"""Co-attention, mutual enhancement, language-driven channel gating and the mask head."""

from __future__ import annotations

import math

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor


class CoAttention(nn.Module):
    """Token-to-position attention A of shape (N, l, h*w), softmax over positions."""

    def __init__(self, e: int, c: int, rng):
        super().__init__()
        if e != c:
            raise ValueError(f"co-attention needs e == c, got {e} and {c}")
        self.proj_text = nn.Linear(e, e, rng, gain=1.0)
        self.proj_image = nn.Conv2d(c, e, 1, rng, gain=1.0)
        self.c = c

    def image_keys(self, fi) -> Tensor:
        """Projected image positions, (N, e, h*w). Depends only on the image."""
        k = self.proj_image(fi)
        n, e, h, w = k.shape
        return T.reshape(k, (n, e, h * w))

    def attend(self, fn, keys) -> Tensor:
        logits = T.matmul(self.proj_text(fn), keys) * (1.0 / math.sqrt(self.c))
        return T.softmax(logits, axis=-1)

    def forward(self, fn, fi) -> Tensor:
        return self.attend(fn, self.image_keys(fi))


def enhance(fn, fi, attention) -> tuple[Tensor, Tensor]:
    """FN_e = FN + A @ flat(FI)^T and FI_e = FI + unflat(A^T @ FN)."""
    fi = T.as_tensor(fi)
    n, c, h, w = fi.shape
    flat = T.reshape(fi, (n, c, h * w))
    fn_e = fn + T.matmul(attention, T.swapaxes(flat, 1, 2))
    back = T.matmul(T.swapaxes(attention, 1, 2), fn)  # (n, hw, e)
    fi_e = fi + T.reshape(T.swapaxes(back, 1, 2), (n, c, h, w))
    return fn_e, fi_e


class ChannelGate(nn.Module):
    """Sigmoid gate per image channel computed from the token mean of FN_e."""

    def __init__(self, e: int, c: int, rng):
        super().__init__()
        hidden = max(c // 4, 1)
        self.fc1 = nn.Linear(e, hidden, rng)
        self.fc2 = nn.Linear(hidden, c, rng, gain=1.0)

    def gate(self, fn_e) -> Tensor:
        g = T.sigmoid(self.fc2(T.relu(self.fc1(T.mean(fn_e, axis=1)))))
        n, c = g.shape
        return T.reshape(g, (n, c, 1, 1))

    def forward(self, fn_e, fi_e) -> Tensor:
        return fi_e * self.gate(fn_e)


class MaskHead(nn.Module):
    """Three conv-BN-ReLU layers (width, width/2, width/4) then a 1-channel conv and sigmoid."""

    def __init__(self, c: int, width: int, rng):
        super().__init__()
        widths = [width, max(width // 2, 1), max(width // 4, 1)]
        self.convs = []
        self.norms = []
        cin = c
        for w in widths:
            self.convs.append(nn.Conv2d(cin, w, 3, rng, padding=1, bias=False))
            self.norms.append(nn.BatchNorm2d(w))
            cin = w
        self.out = nn.Conv2d(cin, 1, 3, rng, padding=1, gain=1.0)

    def logits(self, fm) -> Tensor:
        x = fm
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return self.out(x)

    def forward(self, fm) -> Tensor:
        return T.clamp_probability(T.sigmoid(self.logits(fm)))


class Fusion(nn.Module):
    def __init__(self, e: int, c: int, mask_width: int, rng):
        super().__init__()
        self.attn = CoAttention(e, c, rng)
        self.gate = ChannelGate(e, c, rng)
        self.mask = MaskHead(c, mask_width, rng)

    def fuse(self, fn, fi, keys=None):
        """Returns (A, FN_e, FI_e, FM)."""
        a = self.attn.attend(fn, self.attn.image_keys(fi) if keys is None else keys)
        fn_e, fi_e = enhance(fn, fi, a)
        return a, fn_e, fi_e, self.gate(fn_e, fi_e)

    def forward(self, fn, fi, keys=None) -> Tensor:
        return self.mask(self.fuse(fn, fi, keys)[3])
