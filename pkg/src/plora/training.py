"""Two-stage optimisation: frozen-LLM pretraining and jointly tuned SFT."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .core import GradTape, NonFiniteError
from .data import TEXT, TaskSpec, attach_visual, collate, gen_sequence
from .model import ContractError, Model, loss, param_group
from .vision import VisionEncoder, lldr_rates

log = logging.getLogger(__name__)

LLM_BASE, PLORA, VISION = "LLM_BASE", "PLORA", "VISION"
METRIC_FIELDS = ("step", "stage", "loss", "lr_llm", "lr_plora", "lr_vision_top", "grad_norm")

# Full-scale values, recorded for reference only (never run at desk scale):
#   pretraining: batch size 4906 (sic), 2 epochs, P-LoRA rank 256
#   SFT: batch size 2048, 3000 steps
PRETRAIN_PEAK_LR = 2e-4
SFT_PEAK_LR = 5e-5
WARMUP_FRACTION = 0.01
LLDR_DECAY = 0.9
LLM_LR_SCALE = 0.2
SFT_TEXT_FRACTION = 0.1
BASE_WARMUP_FRACTION = 0.05  # base-LM stand-in only


class Stage(str, enum.Enum):
    PRETRAIN = "PRETRAIN"
    SFT = "SFT"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, last_good: dict[str, np.ndarray]):
        super().__init__(f"step {step}: {reason}")
        self.step = step
        self.last_good = last_good


@dataclass
class ScheduleSpec:
    peak_lr: float = PRETRAIN_PEAK_LR
    warmup_fraction: float = WARMUP_FRACTION
    total_steps: int = 2000

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def validate(self) -> None:
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ContractError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.warmup_steps < 1:
            raise ContractError(
                f"warmup of {self.warmup_fraction} x {self.total_steps} steps rounds to 0 steps")
        if self.warmup_steps >= self.total_steps:
            raise ContractError("warmup must end before the final step")


def schedule_lr(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to 0 at ``total_steps``."""
    spec.validate()
    if not 0 <= step <= spec.total_steps:
        raise ContractError(f"step {step} outside [0, {spec.total_steps}]")
    w, n = spec.warmup_steps, spec.total_steps
    if step < w:
        return spec.peak_lr * (step + 1) / w
    frac = (step - w) / (n - w)
    return spec.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class ParamGroupPolicy:
    group: str
    trainable: bool = True
    lr_scale: float = 1.0
    lldr_decay: float | None = None


def stage_policies(stage: Stage, llm_scale: float = LLM_LR_SCALE,
                   lldr_decay: float = LLDR_DECAY) -> dict[str, ParamGroupPolicy]:
    if Stage(stage) == Stage.PRETRAIN:
        return {LLM_BASE: ParamGroupPolicy(LLM_BASE, trainable=False),
                PLORA: ParamGroupPolicy(PLORA),
                VISION: ParamGroupPolicy(VISION, lldr_decay=lldr_decay)}
    return {LLM_BASE: ParamGroupPolicy(LLM_BASE, lr_scale=llm_scale),
            PLORA: ParamGroupPolicy(PLORA),
            VISION: ParamGroupPolicy(VISION, lldr_decay=lldr_decay)}


def effective_lr(base: float, policy: ParamGroupPolicy, layer_index: int = 0, depth: int = 1) -> float:
    """``base * lr_scale``, times the layer-wise decay factor when the group has one.

    ``layer_index`` -1 (below the first layer) gets one more decay factor.
    """
    if not policy.trainable:
        return 0.0
    lr = base * policy.lr_scale
    if policy.lldr_decay is not None:
        if layer_index < 0:
            lr = lldr_rates(depth, lr, policy.lldr_decay)[0] * policy.lldr_decay
        else:
            lr = lldr_rates(depth, lr, policy.lldr_decay)[layer_index]
    return lr


@dataclass
class DataSource:
    name: str
    count: int
    spec: TaskSpec
    seed: int = 0

    @property
    def kind(self) -> str:
        return self.spec.kind


def weighted_sample(sources: list[DataSource], rng: np.random.Generator) -> int:
    """Source index drawn with probability proportional to its sample count."""
    counts = np.array([s.count for s in sources], dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise ContractError("weighted_sample needs at least one source with count > 0")
    if np.any(counts < 0):
        raise ContractError("source counts must be non-negative")
    if counts.size == 1:
        return 0
    return int(rng.choice(counts.size, p=counts / counts.sum()))


class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, name: str, param: core.Tensor, grad: np.ndarray, lr: float) -> None:
        if lr == 0.0:
            return
        m = self.m.setdefault(name, np.zeros_like(param.data))
        v = self.v.setdefault(name, np.zeros_like(param.data))
        t = self.t[name] = self.t.get(name, 0) + 1
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        new = param.data
        if self.wd and param.data.ndim >= 2:
            new = new * (1.0 - lr * self.wd)
        param.data = new - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 1.0
    text_fraction: float | None = None  # None -> 0 for PRETRAIN, 0.1 for SFT
    llm_scale: float = LLM_LR_SCALE
    lldr_decay: float = LLDR_DECAY
    text_spec: TaskSpec = field(default_factory=lambda: TaskSpec(kind=TEXT))
    checkpoint_on_abort: str | None = None


def all_params(model: Model, encoder: VisionEncoder | None) -> dict[str, core.Tensor]:
    params = dict(model.params)
    if encoder is not None:
        params.update(encoder.params)
    return params


def sample_batch(sources: list[DataSource], cfg: TrainConfig, step: int, text_fraction: float):
    """Deterministic batch for ``(seed, step)``; the first ``round(f*B)`` rows are text-only."""
    rng = np.random.default_rng([cfg.seed, step])
    n_text = int(round(text_fraction * cfg.batch_size))
    seqs = [gen_sequence(cfg.text_spec, rng) for _ in range(n_text)]
    for _ in range(cfg.batch_size - n_text):
        src = sources[weighted_sample(sources, rng)]
        seqs.append(gen_sequence(src.spec, rng))
    return collate(seqs, sources[0].spec.image_side)


def lr_table(model: Model, encoder: VisionEncoder | None, policies, base: float) -> dict[str, float]:
    out = {}
    for name in all_params(model, encoder):
        g = param_group(name)
        if g == VISION:
            out[name] = effective_lr(base, policies[g], encoder.layer_index(name), encoder.depth)
        else:
            out[name] = effective_lr(base, policies[g])
    return out


def train_step(model: Model, encoder: VisionEncoder | None, batch, opt: AdamW,
               lrs: dict[str, float], clip_norm: float) -> tuple[float, float]:
    """One optimiser step over parameters with non-zero learning rate.

    Returns ``(loss, grad_norm_before_clipping)``.
    """
    params = all_params(model, encoder)
    live = {k: p for k, p in params.items() if lrs[k] > 0.0}
    with GradTape() as tape:
        b = attach_visual(batch, encoder) if encoder is not None else batch
        value, _ = loss(model, b)
    tape.backward(value, live.values())
    gnorm = math.sqrt(sum(float((p.grad**2).sum()) for p in live.values()))
    if not math.isfinite(gnorm):
        raise NonFiniteError("non-finite gradient norm")
    factor = clip_norm / gnorm if clip_norm and gnorm > clip_norm else 1.0
    for k, p in live.items():
        opt.update(k, p, p.grad * factor if factor != 1.0 else p.grad, lrs[k])
        p.grad = None
    return value.item(), gnorm


def run_stage(model: Model, encoder: VisionEncoder | None, stage: Stage, spec: ScheduleSpec,
              sources: list[DataSource], steps: int | None = None, cfg: TrainConfig | None = None,
              policies: dict[str, ParamGroupPolicy] | None = None,
              metrics_path: str | Path | None = None) -> list[dict]:
    """Train for ``steps`` (default ``spec.total_steps``) and return the metrics log."""
    stage = Stage(stage)
    cfg = cfg or TrainConfig()
    spec.validate()
    steps = spec.total_steps if steps is None else steps
    if steps > spec.total_steps:
        raise ContractError(f"steps {steps} exceed schedule length {spec.total_steps}")
    policies = policies or stage_policies(stage, cfg.llm_scale, cfg.lldr_decay)
    text_fraction = cfg.text_fraction
    if text_fraction is None:
        text_fraction = SFT_TEXT_FRACTION if stage == Stage.SFT else 0.0
    opt = AdamW()
    metrics: list[dict] = []
    writer = _MetricsWriter(metrics_path) if metrics_path else None
    top = encoder.depth - 1 if encoder is not None else 0
    try:
        for step in range(steps):
            base = schedule_lr(step, spec)
            lrs = lr_table(model, encoder, policies, base)
            batch = sample_batch(sources, cfg, step, text_fraction)
            snapshot = {k: p.data.copy() for k, p in all_params(model, encoder).items()}
            try:
                value, gnorm = train_step(model, encoder, batch, opt, lrs, cfg.clip_norm)
            except NonFiniteError as exc:
                _restore(model, encoder, snapshot)
                if cfg.checkpoint_on_abort:
                    from .io import save_checkpoint
                    save_checkpoint(cfg.checkpoint_on_abort, model, encoder,
                                    {"stage": stage.value, "step": step, "seed": cfg.seed})
                raise TrainingAborted(step, f"non-finite value ({exc})", snapshot) from exc
            row = {"step": step, "stage": stage.value, "loss": value,
                   "lr_llm": effective_lr(base, policies[LLM_BASE]),
                   "lr_plora": effective_lr(base, policies[PLORA]),
                   "lr_vision_top": effective_lr(base, policies[VISION], top, top + 1),
                   "grad_norm": gnorm}
            metrics.append(row)
            if writer:
                writer.write(row)
            if step % 100 == 0:
                log.info("%s step %d loss %.4f lr %.3g", stage.value, step, value, base)
    finally:
        if writer:
            writer.close()
    return metrics


def _restore(model, encoder, snapshot):
    for k, p in all_params(model, encoder).items():
        p.data = snapshot[k]


class _MetricsWriter:
    """Append-only CSV; floats written with ``repr`` so values round-trip exactly."""

    def __init__(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        self.fh = open(path, "a", newline="")
        self.w = csv.writer(self.fh)
        if new:
            self.w.writerow(METRIC_FIELDS)

    def write(self, row: dict) -> None:
        self.w.writerow([repr(row[f]) if isinstance(row[f], float) else row[f] for f in METRIC_FIELDS])

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["step"] = int(r["step"])
        for f in METRIC_FIELDS[2:]:
            r[f] = float(r[f])
    return rows


def evaluate(model: Model, encoder: VisionEncoder | None, spec: TaskSpec, n: int = 256,
             seed: int = 10_000) -> float:
    """Mean scored loss over ``n`` held-out sequences of one task (no tape)."""
    rng = np.random.default_rng(seed)
    seqs = [gen_sequence(spec, rng) for _ in range(n)]
    batch = collate(seqs, spec.image_side)
    if encoder is not None:
        batch = attach_visual(batch, encoder)
    value, _ = loss(model, batch)
    return value.item()


def slot_noise(model: Model, n: int, rng: np.random.Generator) -> np.ndarray:
    """Key-free filler for image slots: random-scale Gaussians, half swapped for token embeddings."""
    d = model.cfg.d_model
    v = rng.normal(0.0, 1.0, (n, d)) * np.exp(rng.uniform(-3.0, 3.0, (n, 1)))
    tok = model.params["embed.tok"].data[rng.integers(0, model.cfg.vocab_size, n)]
    pick = rng.random(n) < 0.5
    v[pick] = tok[pick]
    return v


def pretrain_base_lm(model: Model, sources: list[DataSource], steps: int = 2000, lr: float = 3e-3,
                     batch_size: int = 32, seed: int = 0) -> list[float]:
    """Desk stand-in for a pretrained LLM: fit the base weights only.

    Image slots hold :func:`slot_noise`, so the base learns the task format
    and the key-marginal answer prior but never sees key information.
    Adapters stay untouched.
    """
    opt = AdamW(weight_decay=0.0)
    names = [k for k in model.params if param_group(k) == LLM_BASE]
    cfg = TrainConfig(batch_size=batch_size, seed=seed + 7919)
    sched = ScheduleSpec(peak_lr=lr, warmup_fraction=BASE_WARMUP_FRACTION, total_steps=steps)
    losses = []
    for step in range(steps):
        batch = sample_batch(sources, cfg, step, 0.0)
        rng = np.random.default_rng([seed, step, 1])
        if batch.n_visual:
            batch = batch.with_visual(core.Tensor(slot_noise(model, batch.n_visual, rng)))
        lrs = {k: (schedule_lr(step, sched) if k in names else 0.0) for k in model.params}
        value, _ = train_step(model, None, batch, opt, lrs, 1.0)
        losses.append(value)
    return losses


def base_sources(sources: list[DataSource]) -> list[DataSource]:
    """Task sources plus a text-only source weighted at a third of their total."""
    spec = sources[0].spec
    text = TaskSpec(TEXT, n_keys=spec.n_keys, n_words=spec.n_words)
    total = sum(s.count for s in sources)
    return list(sources) + [DataSource("text", max(1, total // 3), text)]


def build_base_model(cfg, sources: list[DataSource], seed: int = 0, steps: int = 2000,
                     lr: float = 3e-3) -> Model:
    """Freshly built model whose base weights went through :func:`pretrain_base_lm`."""
    from .model import build_model
    model = build_model(cfg, seed)
    pretrain_base_lm(model, base_sources(sources), steps=steps, lr=lr, seed=seed)
    return model
