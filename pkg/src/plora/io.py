"""Checkpoint serialisation and run configuration.

On-disk layout (all integers little-endian)::

    8 bytes   magic b"PLORACKP"
    4 bytes   format version (uint32)
    4 bytes   tensor count (uint32)
    per tensor:
      2 bytes   name length (uint16), then the UTF-8 name
      1 byte    rank
      rank x 4  dims (uint32)
      payload   IEEE-754 binary32, row-major

Configs and run metadata (stage, step, seeds) go in a JSON sidecar next to
the checkpoint (``<path>.json``) so the tensor file stays exactly the layout
above.
"""

from __future__ import annotations

import configparser
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Tensor
from .data import CAPTION, COMPOSE, KNOWLEDGE, MULTITASK, TaskSpec
from .layer import plora_merge
from .model import ConfigError, Model, ModelConfig, PLORA_LAYERS
from .training import (BASE_WARMUP_FRACTION, LLDR_DECAY, LLM_LR_SCALE, PRETRAIN_PEAK_LR, SFT_PEAK_LR, WARMUP_FRACTION,
                       DataSource, ScheduleSpec, Stage)
from .vision import VisionConfig, VisionEncoder

MAGIC = b"PLORACKP"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Parse the tensor table; values come back as float64."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(8, "magic")
    for i, (got, want) in enumerate(zip(magic, MAGIC)):
        if got != want:
            raise FormatError(f"bad magic {magic!r}", i)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", start + 2) from exc
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4")
        out[name] = data.astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return out


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    _atomic_write(Path(path), encode_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def sidecar(path) -> Path:
    return Path(str(path) + ".json")


def checkpoint_tensors(model: Model | None, encoder: VisionEncoder | None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if model is not None:
        out.update({k: t.data for k, t in model.params.items()})
    if encoder is not None:
        out.update({k: t.data for k, t in encoder.params.items()})
    return out


def save_checkpoint(path, model: Model | None, encoder: VisionEncoder | None,
                    meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if model is not None:
        meta["model"] = model.cfg.to_dict()
    if encoder is not None:
        meta["vision"] = asdict(encoder.cfg)
    write_tensors(path, checkpoint_tensors(model, encoder))
    _atomic_write(sidecar(path), json.dumps(meta, indent=1, sort_keys=True).encode())


def load_checkpoint(path) -> tuple[Model | None, VisionEncoder | None, dict]:
    tensors = read_tensors(path)
    side = sidecar(path)
    if not side.exists():
        raise FormatError(f"missing metadata sidecar {side.name}", 0)
    meta = json.loads(side.read_text())
    model = encoder = None
    if "model" in meta:
        from .model import build_model
        model = build_model(ModelConfig.from_dict(meta["model"]), seed=0)
        model.load_state({k: tensors[k] for k in model.params})
    if "vision" in meta:
        encoder = VisionEncoder(VisionConfig(**meta["vision"]), seed=0)
        for k, t in encoder.params.items():
            t.data = tensors[k].copy()
    return model, encoder, meta


def merged_tensors(model: Model) -> dict[str, np.ndarray]:
    """Every P-LoRA layer materialised as ``W_vis``/``W_txt``/``B``; other params as-is."""
    out: dict[str, np.ndarray] = {}
    for k, t in model.params.items():
        layer = k.rsplit(".", 1)[0]
        if layer in model.layers:
            continue
        out[k] = t.data
    for lname, p in model.layers.items():
        W_vis, W_txt, B = plora_merge(p)
        out[f"{lname}.W_vis"] = W_vis
        out[f"{lname}.W_txt"] = W_txt
        out[f"{lname}.B"] = B
    return out


def model_from_merged(tensors: dict[str, np.ndarray], cfg: ModelConfig, path: str = "visual") -> Model:
    """Rank-0 model whose base weights are the merged visual (or text) matrices."""
    from .model import build_model
    key = {"visual": "W_vis", "text": "W_txt"}[path]
    m = build_model(ModelConfig(**{**cfg.to_dict(), "plora_rank": 0}), seed=0)
    state = {}
    for k in m.params:
        layer, _, leaf = k.rpartition(".")
        if layer in m.layers and leaf == "W0":
            state[k] = tensors[f"{layer}.{key}"]
        elif layer in m.layers and leaf == "B0":
            state[k] = tensors[f"{layer}.B"]
        elif layer in m.layers:
            state[k] = m.params[k].data  # empty rank-0 adapter
        else:
            state[k] = tensors[k]
    m.load_state(state)
    return m


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

SOURCE_KINDS = {"caption": CAPTION, "knowledge": KNOWLEDGE, "multitask": MULTITASK, "compose": COMPOSE}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    stage: Stage = Stage.PRETRAIN
    sources: list[DataSource] = field(default_factory=list)
    n_keys: int = 4
    batch_size: int = 32
    seed: int = 0
    data_seed: int = 0
    clip_norm: float = 1.0
    llm_scale: float = LLM_LR_SCALE
    lldr_decay: float = LLDR_DECAY
    base_steps: int = 2000
    base_lr: float = 3e-3
    out_dir: str = "runs"


# section -> key -> (target, parser); target "model.x" etc.
_INT, _FLOAT, _STR = int, float, str
_KEYS: dict[str, tuple[str, type]] = {
    "vocab_size": ("model", _INT), "d_model": ("model", _INT), "n_heads": ("model", _INT),
    "n_layers": ("model", _INT), "d_mlp": ("model", _INT), "max_seq_len": ("model", _INT),
    "plora_rank": ("model", _INT), "plora_scale": ("model", _FLOAT),
    "image_side": ("vision", _INT), "patch": ("vision", _INT), "vision_depth": ("vision", _INT),
    "vision_hidden": ("vision", _INT),
    "peak_lr": ("schedule", _FLOAT), "warmup_fraction": ("schedule", _FLOAT),
    "total_steps": ("schedule", _INT),
    "stage": ("run", _STR), "sources": ("run", _STR), "n_keys": ("run", _INT),
    "batch_size": ("run", _INT), "seed": ("run", _INT), "data_seed": ("run", _INT),
    "clip_norm": ("run", _FLOAT), "llm_scale": ("run", _FLOAT), "lldr_decay": ("run", _FLOAT),
    "base_steps": ("run", _INT), "base_lr": ("run", _FLOAT), "out_dir": ("run", _STR),
}
REQUIRED_KEYS: tuple[str, ...] = ()
_VISION_NAMES = {"vision_depth": "depth", "vision_hidden": "d_hidden"}
DEFAULT_SOURCES = "caption:300,knowledge:100,multitask:100"
DEFAULT_SFT_SOURCES = "caption:300,knowledge:100,multitask:100,compose:100"


def parse_sources(text: str, n_keys: int, vision: VisionConfig, seed: int) -> list[DataSource]:
    out = []
    for i, item in enumerate(filter(None, (s.strip() for s in text.split(",")))):
        name, _, count = item.partition(":")
        name = name.strip().lower()
        if name not in SOURCE_KINDS:
            raise ConfigError(f"sources: unknown kind {name!r}; expected one of {sorted(SOURCE_KINDS)}")
        try:
            n = int(count)
        except ValueError:
            raise ConfigError(f"sources: count for {name!r} must be an integer, got {count!r}") from None
        spec = TaskSpec(SOURCE_KINDS[name], n_keys=n_keys, image_side=vision.image_side,
                        patch=vision.patch)
        out.append(DataSource(name, n, spec, seed + i))
    if not out:
        raise ConfigError("sources: at least one source is required")
    return out


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines, optionally grouped under ``[section]`` headers.

    Section names are cosmetic; every key is globally unique. Unknown keys
    are errors.
    """
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), strict=True)
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw: dict[str, str] = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            if k not in _KEYS:
                raise ConfigError(f"unknown key {k!r}; valid keys: {', '.join(sorted(_KEYS))}")
            if k in raw:
                raise ConfigError(f"key {k!r} given twice")
            if v.strip() == "":
                raise ConfigError(f"missing value for key {k!r}")
            raw[k] = v.strip()
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = str(v)
    for k in REQUIRED_KEYS:
        if k not in raw:
            raise ConfigError(f"missing required key {k!r}")

    vals = {}
    for k, v in raw.items():
        _, typ = _KEYS[k]
        try:
            vals[k] = typ(v)
        except ValueError:
            raise ConfigError(f"{k}: cannot parse {v!r} as {typ.__name__}") from None

    try:
        stage = Stage(vals.get("stage", "PRETRAIN").upper())
    except ValueError:
        raise ConfigError(f"stage must be PRETRAIN or SFT, got {vals['stage']!r}") from None
    mc = ModelConfig(**{k: vals[k] for k in _model_keys() if k in vals})
    vc = VisionConfig(**{_VISION_NAMES.get(k, k): vals[k] for k, (t, _) in _KEYS.items()
                         if t == "vision" and k in vals})
    vc.d_model = mc.d_model
    default_peak = PRETRAIN_PEAK_LR if stage == Stage.PRETRAIN else SFT_PEAK_LR
    default_steps = 2000 if stage == Stage.PRETRAIN else 1000
    sched = ScheduleSpec(peak_lr=vals.get("peak_lr", default_peak),
                         warmup_fraction=vals.get("warmup_fraction", WARMUP_FRACTION),
                         total_steps=vals.get("total_steps", default_steps))
    n_keys = vals.get("n_keys", 4)
    run = RunConfig(model=mc, vision=vc, schedule=sched, stage=stage, n_keys=n_keys)
    for k in ("batch_size", "seed", "data_seed", "clip_norm", "llm_scale", "lldr_decay",
              "base_steps", "base_lr", "out_dir"):
        if k in vals:
            setattr(run, k, vals[k])
    src_default = DEFAULT_SOURCES if stage == Stage.PRETRAIN else DEFAULT_SFT_SOURCES
    run.sources = parse_sources(vals.get("sources", src_default), n_keys, vc, run.data_seed)
    validate_run(run)
    return run


def _model_keys():
    return [f.name for f in fields(ModelConfig)]


def validate_run(run: RunConfig) -> None:
    try:
        run.model.validate()
        run.vision.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        run.schedule.validate()
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    if run.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    try:
        ScheduleSpec(run.base_lr, BASE_WARMUP_FRACTION, run.base_steps).validate()
    except ValueError as exc:
        raise ConfigError(f"base_steps: {exc}") from None
    if not 0.0 < run.lldr_decay <= 1.0:
        raise ConfigError(f"lldr_decay must be in (0, 1], got {run.lldr_decay}")
    if run.llm_scale < 0:
        raise ConfigError("llm_scale must be >= 0")
    from .data import Vocab
    need = Vocab(run.n_keys).size
    if run.model.vocab_size < need:
        raise ConfigError(f"vocab_size {run.model.vocab_size} too small for n_keys={run.n_keys} (need {need})")
