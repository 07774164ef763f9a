"""Decoder-only transformer whose block linear layers are all Partial LoRA layers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import core
from .core import Tensor
from .layer import ModalityMask, PLoRAParams, make_plora, plora_forward

PLORA_LAYERS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")


class ConfigError(ValueError):
    """Invalid model or run configuration; the message names the field."""


class ContractError(ValueError):
    """An operation's precondition does not hold."""


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_mlp: int = 64
    max_seq_len: int = 32
    plora_rank: int = 8  # full scale: 256 for every decoder-block linear layer
    plora_scale: float = 1.0
    norm_eps: float = 1e-6

    def validate(self) -> None:
        for f in ("vocab_size", "d_model", "n_heads", "n_layers", "d_mlp", "max_seq_len"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.plora_rank < 0 or self.plora_rank > min(self.d_model, self.d_mlp):
            raise ConfigError(
                f"plora_rank must be in [0, {min(self.d_model, self.d_mlp)}], got {self.plora_rank}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class InterleavedBatch:
    """A batch of equal-length interleaved sequences, shape [B, T].

    ``token_ids`` holds real ids at TEXT positions (VISUAL positions carry a
    placeholder that is never embedded). ``visual_embeds`` is [N_v, d_model]
    in row-major order of the VISUAL positions; ``images`` are the source
    pixels, one image per contiguous visual block.
    """

    token_ids: np.ndarray
    mask: ModalityMask
    targets: np.ndarray
    loss_mask: np.ndarray
    images: np.ndarray | None = None
    image_keys: np.ndarray | None = None
    visual_embeds: Tensor | None = None
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.atleast_2d(np.asarray(self.token_ids, dtype=np.int64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.int64))
        self.loss_mask = np.atleast_2d(np.asarray(self.loss_mask, dtype=bool))
        if not isinstance(self.mask, ModalityMask):
            self.mask = ModalityMask(self.mask)
        if self.mask.visual.ndim == 1:
            self.mask = ModalityMask(self.mask.visual[None])

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    @property
    def n_visual(self) -> int:
        return self.mask.n_visual

    def check(self) -> None:
        shp = self.token_ids.shape
        for name in ("targets", "loss_mask"):
            if getattr(self, name).shape != shp:
                raise ContractError(f"{name} shape {getattr(self, name).shape} != token_ids {shp}")
        if self.mask.shape != shp:
            raise ContractError(f"modality mask shape {self.mask.shape} != token_ids {shp}")
        if np.any(self.loss_mask & self.mask.visual):
            raise ContractError("loss_mask must be false at every VISUAL position")
        if self.visual_embeds is not None and self.visual_embeds.shape[0] != self.n_visual:
            raise ContractError(
                f"{self.visual_embeds.shape[0]} visual embeddings for {self.n_visual} VISUAL positions")

    def with_visual(self, embeds: Tensor) -> "InterleavedBatch":
        return InterleavedBatch(self.token_ids, self.mask, self.targets, self.loss_mask,
                                self.images, self.image_keys, embeds, list(self.kinds))


class Model:
    """Parameters are kept in ``self.params`` (stable dotted names, insertion order)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.layers: dict[str, PLoRAParams] = {}
        for i in range(cfg.n_layers):
            for lname in PLORA_LAYERS:
                pre = f"block.{i}.{lname}."
                self.layers[f"block.{i}.{lname}"] = PLoRAParams(
                    params[pre + "W0"], params[pre + "B0"],
                    params[pre + "W_A"], params[pre + "W_B"], cfg.plora_scale)

    def named_parameters(self):
        return self.params.items()

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise core.ShapeError(f"{k}: stored {list(arr.shape)} vs model {list(t.shape)}")
            t.data = arr.copy()

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return Model(self.cfg, params)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p: dict[str, Tensor] = {}

    def put(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    put("embed.tok", rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
    put("embed.pos", rng.normal(0.0, 0.1, (cfg.max_seq_len, d)))
    shapes = {"attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d),
              "mlp.up": (d, cfg.d_mlp), "mlp.down": (cfg.d_mlp, d)}
    for i in range(cfg.n_layers):
        put(f"block.{i}.norm1", np.ones(d))
        put(f"block.{i}.norm2", np.ones(d))
        for lname in PLORA_LAYERS:
            c_in, c_out = shapes[lname]
            layer = make_plora(c_in, c_out, cfg.plora_rank, rng, cfg.plora_scale)
            for k, t in layer.tensors().items():
                put(f"block.{i}.{lname}.{k}", t.data)
    put("final_norm", np.ones(d))
    put("lm_head.W", rng.uniform(-1, 1, (cfg.vocab_size, d)) / math.sqrt(d))
    return Model(cfg, p)


def param_group(name: str) -> str:
    """Which optimisation group a parameter belongs to: LLM_BASE, PLORA or VISION."""
    if name.startswith("vision."):
        return "VISION"
    if name.endswith(".W_A") or name.endswith(".W_B"):
        return "PLORA"
    return "LLM_BASE"


def input_vectors(m: Model, b: InterleavedBatch) -> Tensor:
    """Embedded tokens at TEXT positions, visual embeddings at VISUAL positions."""
    vis = b.mask.visual
    ids = np.where(vis, 0, b.token_ids)
    x = core.embedding(m.params["embed.tok"], ids)
    if vis.any():
        if b.visual_embeds is None:
            raise ContractError("batch has VISUAL positions but no visual embeddings")
        x = core.place_rows(x, vis, b.visual_embeds)
    return x


def _attention(m: Model, x: Tensor, vis: np.ndarray, i: int) -> Tensor:
    cfg = m.cfg
    B, T, d = x.shape
    H, dh = cfg.n_heads, d // cfg.n_heads
    L = m.layers

    def heads(t: Tensor) -> Tensor:
        return core.permute(core.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(plora_forward(x, vis, L[f"block.{i}.attn.q"]))
    k = heads(plora_forward(x, vis, L[f"block.{i}.attn.k"]))
    v = heads(plora_forward(x, vis, L[f"block.{i}.attn.v"]))
    scores = core.scale(core.matmul(q, core.transpose(k)), 1.0 / math.sqrt(dh))
    att = core.softmax_rows(scores, causal=True)
    ctx = core.reshape(core.permute(core.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    return plora_forward(ctx, vis, L[f"block.{i}.attn.o"])


def _mlp(m: Model, x: Tensor, vis: np.ndarray, i: int) -> Tensor:
    h = core.gelu(plora_forward(x, vis, m.layers[f"block.{i}.mlp.up"]))
    return plora_forward(h, vis, m.layers[f"block.{i}.mlp.down"])


def forward(m: Model, b: InterleavedBatch) -> Tensor:
    """Logits Tensor[B, T, vocab_size] for an interleaved batch."""
    cfg = m.cfg
    B, T = b.shape
    if T > cfg.max_seq_len:
        raise ContractError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    b.check()
    vis = b.mask.visual
    p = m.params
    x = input_vectors(m, b)
    x = core.add(x, core.embedding(p["embed.pos"], np.arange(T)))
    for i in range(cfg.n_layers):
        x = core.add(x, _attention(m, core.rms_norm(x, p[f"block.{i}.norm1"], cfg.norm_eps), vis, i))
        x = core.add(x, _mlp(m, core.rms_norm(x, p[f"block.{i}.norm2"], cfg.norm_eps), vis, i))
    x = core.rms_norm(x, p["final_norm"], cfg.norm_eps)
    return core.linear(x, p["lm_head.W"])


def loss(m: Model, b: InterleavedBatch) -> tuple[Tensor, bool]:
    """Masked mean next-token cross-entropy; ``(loss, empty_mask_flag)``."""
    logits = forward(m, b)
    return core.cross_entropy(logits, b.targets, b.loss_mask)
