"""Small text and image encoders sharing a 32-d embedding space.

They are trained contrastively on the synthetic corpus and then frozen; the
cycle losses only need a shared space in which captions and renders can be
compared by cosine similarity.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Adam, Conv2d, Linear, Module

EMBED_DIM = 32
N_BUCKETS = 256
IMAGE_RES = 32


@dataclass(frozen=True)
class TextPrompt:
    caption: str

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise ValueError("caption must be nonempty")

    @property
    def token_ids(self) -> list:
        return tokenize(self.caption)


def tokenize(caption: str) -> list:
    """Lower-cased words hashed (crc32) into ``N_BUCKETS`` ids."""
    words = re.findall(r"[a-z0-9]+", caption.lower())
    return [zlib.crc32(w.encode()) % N_BUCKETS for w in words]


def bag_of_tokens(captions) -> np.ndarray:
    out = np.zeros((len(captions), N_BUCKETS), dtype=np.float32)
    for i, c in enumerate(captions):
        c = c.caption if isinstance(c, TextPrompt) else c
        if not c or not c.strip():
            raise ValueError("caption must be nonempty")
        for t in tokenize(c):
            out[i, t] += 1.0
    return out


class TextEncoder(Module):
    def __init__(self, rng: np.random.Generator, dim: int = EMBED_DIM):
        self.proj = Linear(rng, N_BUCKETS, dim)

    def __call__(self, captions) -> Tensor:
        """Unit embeddings ``(N, dim)`` for a list of captions."""
        return ad.l2_normalize(self.proj(Tensor._wrap(bag_of_tokens(captions))), axis=-1)


def to_nchw(images, res: int = IMAGE_RES) -> Tensor:
    """``(H, W, 3)`` or ``(N, H, W, 3)`` images to ``(N, 3, res, res)`` by area pooling."""
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    n, h, w, _ = x.shape
    if h != w or h % res:
        raise ad.ShapeError("to_nchw", x.shape, detail=f"side must be a multiple of {res}")
    f = h // res
    if f > 1:
        x = ad.mean(ad.reshape(x, (n, res, f, res, f, 3)), axis=(2, 4))
    return ad.transpose(x, (0, 3, 1, 2))


class ImageEncoder(Module):
    def __init__(self, rng: np.random.Generator, dim: int = EMBED_DIM):
        self.c1 = Conv2d(rng, 3, 16, 3, stride=2)
        self.c2 = Conv2d(rng, 16, 32, 3, stride=2)
        self.c3 = Conv2d(rng, 32, 32, 3, stride=2)
        self.head = Linear(rng, 32, dim)

    def __call__(self, images) -> Tensor:
        x = to_nchw(images)
        x = ad.relu(self.c1(x))
        x = ad.relu(self.c2(x))
        x = ad.relu(self.c3(x))
        x = ad.mean(x, axis=(2, 3))
        return ad.l2_normalize(self.head(x), axis=-1)


class SemanticEncoders(Module):
    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        rng = np.random.default_rng(seed)
        self.text = TextEncoder(rng, dim)
        self.image = ImageEncoder(rng, dim)

    def f_clip_t(self, prompt) -> Tensor:
        """Unit text embedding ``(dim,)``."""
        cap = prompt.caption if isinstance(prompt, TextPrompt) else prompt
        return ad.reshape(self.text([cap]), (-1,))

    def f_clip_i(self, image) -> Tensor:
        """Unit image embedding ``(dim,)`` for one ``(H, W, 3)`` image."""
        return ad.reshape(self.image(image), (-1,))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors that are already unit length."""
    return ad.sum_(a * b)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(logits.data, axis=axis, keepdims=True)
    z = logits - shift
    return z - ad.log(ad.sum_(ad.exp(z), axis=axis, keepdims=True))


def info_nce(img: Tensor, txt: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over in-batch pairs (row i of each side matches)."""
    logits = ad.matmul(img, ad.transpose(txt)) / temperature
    n = logits.shape[0]
    eye = np.eye(n, dtype=logits.dtype)
    li = -ad.sum_(log_softmax(logits, 1) * eye) / n
    lt = -ad.sum_(log_softmax(logits, 0) * eye) / n
    return (li + lt) * 0.5


def pretrain_contrastive(images: np.ndarray, captions: list, epochs: int = 30,
                         temperature: float = 0.07, lr: float = 3e-3, batch: int = 32,
                         seed: int = 0, log=None) -> tuple:
    """Train a fresh encoder pair on ``(scene, view)`` images and freeze it.

    ``images`` is ``(n_scenes, n_views, H, W, 3)``; each batch draws distinct
    scenes with one random view each.  Returns ``(encoders, loss_history)``.
    """
    n_scenes = images.shape[0]
    if n_scenes < 2 or len(captions) != n_scenes:
        raise ValueError("contrastive pretraining needs at least 2 captioned scenes")
    enc = SemanticEncoders(seed)
    opt = Adam(enc.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    pooled = to_nchw(images.reshape((-1,) + images.shape[2:])).data
    pooled = pooled.reshape(images.shape[:2] + pooled.shape[1:])
    history = []
    b = min(batch, n_scenes)
    for ep in range(epochs):
        order = rng.permutation(n_scenes)
        losses = []
        for start in range(0, n_scenes - b + 1, b):
            idx = order[start:start + b]
            views = rng.integers(images.shape[1], size=len(idx))
            x = Tensor._wrap(pooled[idx, views])
            opt.zero_grad()
            with ad.Tape():
                zi = _encode_pooled(enc.image, x)
                zt = enc.text([captions[i] for i in idx])
                loss = info_nce(zi, zt, temperature)
                ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {ep}: info_nce {history[-1]:.4f}")
    enc.freeze()
    return enc, history


def _encode_pooled(encoder: ImageEncoder, x: Tensor) -> Tensor:
    h = ad.relu(encoder.c1(x))
    h = ad.relu(encoder.c2(h))
    h = ad.relu(encoder.c3(h))
    h = ad.mean(h, axis=(2, 3))
    return ad.l2_normalize(encoder.head(h), axis=-1)


def retrieval_top1(enc: SemanticEncoders, images: np.ndarray, captions: list) -> float:
    """Fraction of images whose own caption is the nearest among all captions given."""
    zi = enc.image(images).data
    zt = enc.text(captions).data
    return float(np.mean(np.argmax(zi @ zt.T, axis=1) == np.arange(len(captions))))
