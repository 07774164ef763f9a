"""Tape gradients of the full model against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GradTape, finite_diff_grad, max_rel_error
from .data import CAPTION, TEXT, TaskSpec, attach_visual, collate, gen_sequence
from .model import Model, ModelConfig, build_model, loss
from .vision import VisionConfig, VisionEncoder

# |a - b| / max(|a|, |b|, REL_FLOOR): entries whose true gradient is below the
# floor are compared in absolute terms against it
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_coords: int
    per_tensor: dict[str, float]


def perturb_adapters(model: Model, rng: np.random.Generator, std: float = 0.3) -> None:
    """Give every adapter and bias non-trivial values so all paths carry gradient."""
    for name, t in model.params.items():
        if name.endswith((".W_B", ".B0")):
            t.data = rng.normal(0.0, std, t.shape)
        elif name.endswith(("norm1", "norm2", "final_norm")):
            t.data = 1.0 + rng.normal(0.0, 0.1, t.shape)


def desk_setup(seed: int = 7, d_model: int = 8, n_layers: int = 2, rank: int = 4,
               cfg: ModelConfig | None = None, vision: VisionConfig | None = None):
    """Small model + encoder + mixed visual/text batch for gradient checking."""
    rng = np.random.default_rng(seed)
    cfg = cfg or ModelConfig(vocab_size=40, d_model=d_model, n_heads=2, n_layers=n_layers,
                             d_mlp=2 * d_model, max_seq_len=16, plora_rank=rank)
    model = build_model(cfg, seed)
    perturb_adapters(model, rng)
    vision = vision or VisionConfig(d_model=cfg.d_model, depth=2, d_hidden=2 * cfg.d_model)
    enc = VisionEncoder(vision, seed + 1)
    for t in enc.params.values():
        t.data = t.data + rng.normal(0.0, 0.1, t.shape)
    cap = TaskSpec(CAPTION, image_side=vision.image_side, patch=vision.patch)
    seqs = [gen_sequence(cap, rng) for _ in range(2)] + [gen_sequence(TaskSpec(TEXT), rng)]
    batch = collate(seqs, vision.image_side)
    batch.loss_mask = ~batch.mask.visual & (batch.token_ids != 0)
    return model, enc, batch


def check_model_gradients(model: Model, encoder: VisionEncoder | None, batch, h: float = 1e-5,
                          max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients with central differences for every parameter tensor.

    ``max_coords`` limits each tensor to a seeded random subset of entries.
    """
    params = dict(model.params)
    if encoder is not None:
        params.update(encoder.params)

    def objective() -> float:
        b = attach_visual(batch, encoder) if encoder is not None else batch
        value, _ = loss(model, b)
        return value.item()

    with GradTape() as tape:
        b = attach_visual(batch, encoder) if encoder is not None else batch
        value, _ = loss(model, b)
    tape.backward(value, params.values())

    rng = np.random.default_rng(seed)
    per: dict[str, float] = {}
    n = 0
    for name, t in params.items():
        if t.size == 0:
            continue
        idx = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            idx = np.sort(rng.choice(t.size, max_coords, replace=False))
        flat = t.data.reshape(-1)
        orig = flat[idx].copy()

        def f(vals, idx=idx, t=t):
            flat = t.data.reshape(-1)
            flat[idx] = vals
            return objective()

        try:
            fd = finite_diff_grad(f, orig, h)
        finally:
            t.data.reshape(-1)[idx] = orig
        per[name] = max_rel_error(t.grad.reshape(-1)[idx], fd, REL_FLOOR)
        n += idx.size
        t.grad = None
    worst = max(per, key=per.get)
    return GradCheckReport(per[worst], worst, n, per)
