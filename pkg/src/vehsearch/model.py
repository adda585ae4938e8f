"""The full network: encoders, fusion, mask head and auxiliary heads wired together."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .encoders import EncoderConfig, ImageEncoder, TextEncoder, cls_feature
from .fusion import Fusion
from .heads import NUM_COLORS, NUM_TYPES, FuturePredictor, ImageClassifier, Substitution, SubstitutionBundle, TextClassifier
from .scoring import ClassLogits


@dataclass
class Outputs:
    fn: Tensor
    fi: Tensor
    attention: Tensor
    fn_e: Tensor
    fi_e: Tensor
    fm: Tensor
    mask: Tensor
    logits: ClassLogits
    bundle: SubstitutionBundle
    future: Tensor


class RetrievalNet(nn.Module):
    def __init__(self, config: EncoderConfig, seed: int = 0,
                 n_colors: int = NUM_COLORS, n_types: int = NUM_TYPES):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.text = TextEncoder(config, rng)
        self.image = ImageEncoder(config, rng)
        self.fuse = Fusion(config.e, config.c, config.mask_width, rng)
        self.cls_text = TextClassifier(config.e, rng, n_colors, n_types)
        self.cls_img = ImageClassifier(config.c, rng, n_colors, n_types)
        self.subst = Substitution(config.e, config.c, rng)
        self.future = FuturePredictor(config.c, rng)

    def forward(self, ids, attention_mask, images, box_masks) -> Outputs:
        fn = self.text(ids, attention_mask)
        fi = self.image(images)
        b = T.as_tensor(box_masks)
        a, fn_e, fi_e, fm = self.fuse.fuse(fn, fi)
        mask = self.fuse.mask(fm)
        c_n, t_n = self.cls_text(cls_feature(fn))
        c_i, t_i, _ = self.cls_img(fi, b)
        return Outputs(
            fn=fn, fi=fi, attention=a, fn_e=fn_e, fi_e=fi_e, fm=fm, mask=mask,
            logits=ClassLogits(c_n, t_n, c_i, t_i),
            bundle=self.subst(fn, fi, b),
            future=self.future(fi),
        )

    def named_groups(self) -> dict[str, nn.Module]:
        return {"text": self.text, "image": self.image, "fuse": self.fuse, "cls_text": self.cls_text,
                "cls_img": self.cls_img, "subst": self.subst, "future": self.future}
