"""Miniature vision encoder and synthetic key-bearing images.

The encoder is patch flattening, a linear patch projection, and ``depth``
pre-norm residual MLP layers. There is no per-patch position embedding, so a
constant image maps to identical features at every patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, add, gelu, linear, reshape, rms_norm


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # [S, S] in [0, 1]
    class_key: int

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def key_patterns(n_keys: int, side: int, seed: int = 1234) -> np.ndarray:
    """Fixed seeded dictionary of binary patterns, one per class key."""
    rng = np.random.default_rng(seed)
    pats = rng.integers(0, 2, size=(n_keys, side, side)).astype(np.float64)
    # distinct by construction: re-draw collisions
    for k in range(n_keys):
        while any(np.array_equal(pats[k], pats[j]) for j in range(k)):
            pats[k] = rng.integers(0, 2, size=(side, side))
    return pats


def make_image(key: int, patterns: np.ndarray, rng: np.random.Generator,
               noise: float = 0.2) -> SyntheticImage:
    """Blend the key's pattern with uniform noise; pixels stay in [0, 1]."""
    base = patterns[key]
    px = (1.0 - noise) * base + noise * rng.random(base.shape)
    return SyntheticImage(px, int(key))


def nearest_key(img: SyntheticImage, patterns: np.ndarray) -> int:
    """Recover the class key as the closest pattern (what the generator embeds)."""
    d = ((patterns - img.pixels[None]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(d))


@dataclass
class VisionConfig:
    image_side: int = 8
    patch: int = 4
    d_model: int = 32
    depth: int = 2
    d_hidden: int = 64

    def validate(self) -> None:
        if self.image_side % self.patch:
            raise ValueError(f"image_side {self.image_side} is not divisible by patch {self.patch}")
        if self.depth < 1:
            raise ValueError("vision depth must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2


class VisionEncoder:
    """Parameters live in ``self.params`` under stable dotted names.

    ``layer_index`` gives each parameter's depth for layer-wise LR decay:
    the patch projection sits below layer 0 (index -1), the final norm on
    top of layer ``depth - 1``.
    """

    def __init__(self, cfg: VisionConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, h, pp = cfg.d_model, cfg.d_hidden, cfg.patch * cfg.patch
        p: dict[str, Tensor] = {}
        p["vision.proj.W"] = rng.uniform(-1, 1, (d, pp)) / np.sqrt(pp)
        p["vision.proj.b"] = rng.normal(0.0, 0.1, d)
        for i in range(cfg.depth):
            p[f"vision.layer.{i}.norm"] = np.ones(d)
            p[f"vision.layer.{i}.fc1.W"] = rng.uniform(-1, 1, (h, d)) / np.sqrt(d)
            p[f"vision.layer.{i}.fc1.b"] = np.zeros(h)
            p[f"vision.layer.{i}.fc2.W"] = rng.uniform(-1, 1, (d, h)) / np.sqrt(h)
            p[f"vision.layer.{i}.fc2.b"] = np.zeros(d)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    @property
    def depth(self) -> int:
        return self.cfg.depth

    def layer_index(self, name: str) -> int:
        parts = name.split(".")
        if parts[1] == "proj":
            return -1
        return int(parts[2])

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        """[N, S, S] -> [N, n_patches, patch*patch], patches in row-major order."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[None]
        n, s, s2 = pixels.shape
        q = self.cfg.patch
        if s != s2 or s % q:
            raise ValueError(f"image side {s}x{s2} is not divisible by patch {q}")
        g = s // q
        return pixels.reshape(n, g, q, g, q).transpose(0, 1, 3, 2, 4).reshape(n, g * g, q * q)

    def encode(self, pixels: np.ndarray) -> Tensor:
        """[N, S, S] images -> Tensor[N, n_patches, d_model]."""
        x = Tensor(self.patchify(pixels))
        p = self.params
        h = linear(x, p["vision.proj.W"], p["vision.proj.b"])
        for i in range(self.cfg.depth):
            pre = f"vision.layer.{i}."
            z = rms_norm(h, p[pre + "norm"])
            z = gelu(linear(z, p[pre + "fc1.W"], p[pre + "fc1.b"]))
            h = add(h, linear(z, p[pre + "fc2.W"], p[pre + "fc2.b"]))
        return h

    def encode_flat(self, pixels: np.ndarray) -> Tensor:
        """Encoded patches of all images stacked as Tensor[N * n_patches, d_model]."""
        h = self.encode(pixels)
        return reshape(h, (-1, self.cfg.d_model))


def encode_image(img: SyntheticImage, enc: VisionEncoder) -> Tensor:
    """One image -> Tensor[n_patches, d_model]."""
    return reshape(enc.encode(img.pixels[None]), (enc.cfg.n_patches, enc.cfg.d_model))


def lldr_rates(depth: int, base_lr: float, decay: float) -> list[float]:
    """Layer ``l`` (0 nearest the input) gets ``base_lr * decay**(depth-1-l)``."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    return [base_lr * decay ** (depth - 1 - layer) for layer in range(depth)]
