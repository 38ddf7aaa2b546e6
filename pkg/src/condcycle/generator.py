"""Toy conditional triplane generator: condition map, caption and pose in, triplane out."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose
from .conditions import KINDS, ConditionMap
from .nn import Conv2d, Linear, Module
from .semantic import EMBED_DIM, SemanticEncoders, TextPrompt
from .triplane import RadianceDecoder, Triplane

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorConfig:
    cond_res: int = 64
    channels: int = 8  # C_p
    plane_res: int = 16  # H_p = W_p
    mlp_width: int = 32
    adapter_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.cond_res % 16 or self.cond_res < 32:
            raise ValueError("cond_res must be a multiple of 16 and at least 32")
        if self.plane_res not in (self.cond_res // 4, self.cond_res // 2):
            raise ValueError("plane_res must be cond_res/4 or cond_res/2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of an NCHW tensor."""
    n, c, h, w = x.shape
    x = ad.reshape(x, (n, c, h, 1, w, 1))
    x = ad.broadcast_to(x, (n, c, h, 2, w, 2))
    return ad.reshape(x, (n, c, 2 * h, 2 * w))


class FiLM(Module):
    """Per-channel ``(1 + gamma) * x + beta`` driven by a conditioning vector."""

    def __init__(self, rng, n_cond: int, channels: int):
        self.gamma = Linear(rng, n_cond, channels, scale=0.1)
        self.beta = Linear(rng, n_cond, channels, scale=0.1)

    def __call__(self, x: Tensor, z: Tensor) -> Tensor:
        c = x.shape[1]
        g = ad.reshape(self.gamma(z), (1, c, 1, 1))
        b = ad.reshape(self.beta(z), (1, c, 1, 1))
        return x * (g + 1.0) + b


def condition_tensor(cmap: ConditionMap) -> Tensor:
    """``(1, C, H, W)`` network input from a condition map."""
    x = cmap.data
    if x.ndim == 2:
        return ad.reshape(x, (1, 1) + x.shape)
    return ad.expand_dims(ad.transpose(x, (2, 0, 1)), 0)


class TriplaneGenerator(Module):
    """U-Net over the condition map with a fully connected bottleneck.

    Text and pose enter through FiLM at the bottleneck and again at plane
    resolution.  The 24 output channels are read as three ``C_p``-channel
    planes, flipped vertically so that plane rows follow the world axis that
    image rows descend along in the frontal view.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(),
                 text_encoder: Optional[SemanticEncoders] = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        a = cfg.adapter_channels
        self.adapters = {k: Conv2d(rng, 3 if k == "normal" else 1, a, k=1) for k in KINDS}
        self.e1 = Conv2d(rng, a, 16, 3, stride=2)
        self.e2 = Conv2d(rng, 16, 32, 3, stride=2)
        self.e3 = Conv2d(rng, 32, 32, 3, stride=2)
        self.e4 = Conv2d(rng, 32, 32, 3, stride=2)
        self.pose = Linear(rng, 16, 32)
        n_cond = EMBED_DIM + 32
        self.film_mid = FiLM(rng, n_cond, 32)
        b = cfg.cond_res // 16
        self.fc = Linear(rng, 32 * b * b, 32 * b * b, scale=0.5)
        self.d3 = Conv2d(rng, 64, 32, 3)
        self.d2 = Conv2d(rng, 64, 32, 3)
        self.film_out = FiLM(rng, n_cond, 32)
        self.d1 = Conv2d(rng, 32 + 16, 32, 3) if cfg.plane_res == cfg.cond_res // 2 else None
        self.head = Conv2d(rng, 32, 3 * cfg.channels, 3)
        self.decoder = RadianceDecoder(rng, cfg.channels, cfg.mlp_width)
        self._text = text_encoder
        self._text_cache: dict = {}
        self.n_params = self.num_parameters()
        log.info("TriplaneGenerator: %d parameters", self.n_params)

    def set_text_encoder(self, enc: SemanticEncoders) -> None:
        self._text = enc
        self._text_cache.clear()

    def text_embedding(self, prompt) -> np.ndarray:
        cap = prompt.caption if isinstance(prompt, TextPrompt) else str(prompt)
        if not cap.strip():
            raise ValueError("prompt must be nonempty")
        if self._text is None:
            raise RuntimeError("generator has no text encoder; call set_text_encoder first")
        e = self._text_cache.get(cap)
        if e is None:
            e = self._text.f_clip_t(cap).data.copy()
            self._text_cache[cap] = e
        return e

    def __call__(self, cond: ConditionMap, prompt, pose: CameraPose) -> Triplane:
        res = self.cfg.cond_res
        if cond.data.shape[:2] != (res, res):
            raise ad.ShapeError("f_gen", cond.data.shape, detail=f"condition must be {res}x{res}")
        z_pose = self.pose(Tensor._wrap(pose.transform.reshape(1, 16).astype(np.float32)))
        z_text = Tensor._wrap(self.text_embedding(prompt).reshape(1, -1))
        z = ad.concat([z_text, z_pose], axis=1)

        x = self.adapters[cond.kind](condition_tensor(cond))
        h1 = ad.relu(self.e1(x))
        h2 = ad.relu(self.e2(h1))
        h3 = ad.relu(self.e3(h2))
        h4 = ad.relu(self.e4(h3))
        m = self.film_mid(h4, z)
        flat = ad.reshape(m, (1, -1))
        m = m + ad.reshape(ad.relu(self.fc(flat)), m.shape)
        u = ad.relu(self.d3(ad.concat([upsample2(m), h3], axis=1)))
        u = ad.relu(self.d2(ad.concat([upsample2(u), h2], axis=1)))
        u = self.film_out(u, z)
        if self.d1 is not None:
            u = ad.relu(self.d1(ad.concat([upsample2(u), h1], axis=1)))
        out = self.head(u)
        p = self.cfg.plane_res
        planes = ad.reshape(out, (3, self.cfg.channels, p, p))
        planes = ad.take(planes, np.arange(p - 1, -1, -1), axis=2)
        return Triplane(planes)


def f_gen(generator: TriplaneGenerator, cond: ConditionMap, prompt, pose: CameraPose) -> Triplane:
    return generator(cond, prompt, pose)
