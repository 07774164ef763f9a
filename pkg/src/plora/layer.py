"""Partial LoRA linear layer.

Every row goes through the base map ``W0 x + B0``; rows flagged VISUAL also
get the low-rank residual ``W_B (W_A x)``. Rows may interleave freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import ShapeError, Tensor, add, add_rows, gather_rows, linear, scale


class Modality(enum.IntEnum):
    TEXT = 0
    VISUAL = 1


class ModalityMask:
    """Per-position VISUAL/TEXT flags; any leading shape (``[T]`` or ``[B, T]``)."""

    __slots__ = ("visual",)

    def __init__(self, visual):
        self.visual = np.asarray(visual, dtype=bool)

    @classmethod
    def from_string(cls, s: str) -> "ModalityMask":
        bad = set(s) - {"V", "T"}
        if bad:
            raise ValueError(f"mask string may only contain V/T, got {sorted(bad)}")
        return cls([c == "V" for c in s])

    @classmethod
    def all_text(cls, shape) -> "ModalityMask":
        return cls(np.zeros(shape, dtype=bool))

    @classmethod
    def all_visual(cls, shape) -> "ModalityMask":
        return cls(np.ones(shape, dtype=bool))

    def to_string(self) -> str:
        return "".join("V" if v else "T" for v in self.visual.reshape(-1))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.visual.shape

    def __len__(self) -> int:
        return self.visual.shape[-1]

    def __getitem__(self, i) -> Modality:
        return Modality.VISUAL if self.visual[i] else Modality.TEXT

    @property
    def n_visual(self) -> int:
        return int(self.visual.sum())

    def permuted(self, perm) -> "ModalityMask":
        return ModalityMask(self.visual[..., perm])

    def __eq__(self, other) -> bool:
        return isinstance(other, ModalityMask) and np.array_equal(self.visual, other.visual)

    def __repr__(self) -> str:
        return f"ModalityMask({self.to_string()!r})" if self.visual.ndim == 1 else f"ModalityMask(shape={self.shape})"


@dataclass
class PLoRAParams:
    W0: Tensor
    B0: Tensor
    W_A: Tensor
    W_B: Tensor
    scale: float = 1.0

    def __post_init__(self):
        c_out, c_in = self.W0.shape
        if self.B0.shape != (c_out,):
            raise ShapeError(f"B0 {list(self.B0.shape)} does not match W0 {list(self.W0.shape)}")
        if self.W_A.data.ndim != 2 or self.W_A.shape[1] != c_in:
            raise ShapeError(f"W_A {list(self.W_A.shape)} must be [rank, {c_in}]")
        if self.W_B.shape != (c_out, self.W_A.shape[0]):
            raise ShapeError(f"W_B {list(self.W_B.shape)} must be [{c_out}, {self.W_A.shape[0]}]")

    @property
    def rank(self) -> int:
        return self.W_A.shape[0]

    @property
    def c_in(self) -> int:
        return self.W0.shape[1]

    @property
    def c_out(self) -> int:
        return self.W0.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"W0": self.W0, "B0": self.B0, "W_A": self.W_A, "W_B": self.W_B}


def _mask_array(mask, lead: tuple[int, ...]) -> np.ndarray:
    vis = mask.visual if isinstance(mask, ModalityMask) else np.asarray(mask, dtype=bool)
    if vis.shape != lead:
        raise ValueError(f"modality mask shape {list(vis.shape)} does not match input rows {list(lead)}")
    return vis


def base_forward(X: Tensor, p: PLoRAParams) -> Tensor:
    return linear(X, p.W0, p.B0)


def plora_forward(X: Tensor, mask, p: PLoRAParams) -> Tensor:
    """Route each row: TEXT -> ``W0 x + B0``; VISUAL -> ``W0 x + W_B W_A x + B0``."""
    if X.shape[-1] != p.c_in:
        raise ShapeError(f"plora_forward: input {list(X.shape)} vs W0 {list(p.W0.shape)}")
    vis = _mask_array(mask, X.shape[:-1])
    out = base_forward(X, p)
    if p.rank == 0 or not vis.any():
        return out
    xv = gather_rows(X, vis)
    resid = linear(linear(xv, p.W_A), p.W_B)
    if p.scale != 1.0:
        resid = scale(resid, p.scale)
    return add_rows(out, vis, resid)


def lora_forward(X: Tensor, p: PLoRAParams) -> Tensor:
    """Ordinary (non-partial) LoRA applied to every row."""
    out = base_forward(X, p)
    if p.rank == 0:
        return out
    resid = linear(linear(X, p.W_A), p.W_B)
    if p.scale != 1.0:
        resid = scale(resid, p.scale)
    return add(out, resid)


def plora_merge(p: PLoRAParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense ``(W_vis, W_txt, B)`` with ``W_vis = W0 + scale * W_B @ W_A``."""
    W0 = p.W0.data
    W_vis = W0 + p.scale * (p.W_B.data @ p.W_A.data) if p.rank else W0.copy()
    return W_vis, W0.copy(), p.B0.data.copy()


def plora_init(c_in: int, c_out: int, rank: int, seed) -> tuple[Tensor, Tensor]:
    """Fresh adapter pair: ``W_A ~ N(0, 1/c_in)``, ``W_B = 0`` (exact no-op)."""
    if rank < 0:
        raise ValueError(f"rank must be >= 0, got {rank}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    W_A = rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(rank, c_in))
    W_B = np.zeros((c_out, rank))
    return Tensor(W_A, requires_grad=True), Tensor(W_B, requires_grad=True)


def make_plora(c_in: int, c_out: int, rank: int, seed, scale: float = 1.0) -> PLoRAParams:
    """Base weights (uniform fan-in init, zero bias) plus a fresh adapter."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(c_in)
    W0 = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in)), requires_grad=True)
    B0 = Tensor(np.zeros(c_out), requires_grad=True)
    W_A, W_B = plora_init(c_in, c_out, rank, rng)
    return PLoRAParams(W0, B0, W_A, W_B, scale)
