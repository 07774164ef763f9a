"""Experiment runner: ``plora {pretrain,sft,eval,gradcheck,merge}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .core import NonFiniteError
from .data import TEXT, NotEnumerableError, TaskSpec, entropy_floor
from .gradcheck import check_model_gradients, desk_setup
from .io import (FormatError, RunConfig, load_checkpoint, merged_tensors, parse_config,
                 save_checkpoint, sidecar, write_tensors)
from .model import ConfigError, ContractError
from .training import Stage, TrainConfig, TrainingAborted, build_base_model, evaluate, run_stage
from .vision import VisionEncoder

log = logging.getLogger("plora")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
GRADCHECK_TOL = 1e-4


def _setup_logging() -> None:
    level = os.environ.get("PLORA_LOG_LEVEL", "quiet").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"PLORA_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def _load_run(args, stage: str | None = None) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {"seed": args.seed, "total_steps": args.steps, "plora_rank": args.rank,
                 "out_dir": args.out}
    if stage is not None:
        overrides["stage"] = stage
    return parse_config(text, overrides)


def _text_spec(run: RunConfig) -> TaskSpec:
    return TaskSpec(TEXT, n_keys=run.n_keys)


def _initial(run: RunConfig, init: str | None):
    """Model + encoder from ``--init``, or a freshly pretrained base with a new encoder."""
    if init:
        model, enc, _ = load_checkpoint(init)
        if model is None:
            raise FormatError(f"{init} holds no model", 0)
        if enc is None:
            enc = VisionEncoder(run.vision, run.seed + 1)
        return model, enc
    log.info("building base language model (%d steps)", run.base_steps)
    model = build_base_model(run.model, run.sources, run.seed, run.base_steps, run.base_lr)
    return model, VisionEncoder(run.vision, run.seed + 1)


def _train(args, stage: Stage) -> int:
    run = _load_run(args, stage.value)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, enc = _initial(run, args.init)
    meta = {"seed": run.seed, "data_seed": run.data_seed}
    if not args.init:
        save_checkpoint(out / "base.plckp", model, enc, {**meta, "stage": "BASE", "step": 0})
    metrics = out / f"metrics_{stage.value.lower()}.csv"
    if metrics.exists():
        metrics.unlink()
    cfg = TrainConfig(batch_size=run.batch_size, seed=run.data_seed + 1000 * run.seed,
                      clip_norm=run.clip_norm, llm_scale=run.llm_scale, lldr_decay=run.lldr_decay,
                      text_spec=_text_spec(run),
                      checkpoint_on_abort=str(out / "last_good.plckp"))
    rows = run_stage(model, enc, stage, run.schedule, run.sources, cfg=cfg, metrics_path=metrics)
    ckpt = out / f"{stage.value.lower()}.plckp"
    save_checkpoint(ckpt, model, enc, {**meta, "stage": stage.value, "step": len(rows)})
    print(f"{stage.value}: {len(rows)} steps, final loss {rows[-1]['loss']:.6f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, Stage.PRETRAIN)


def cmd_sft(args) -> int:
    return _train(args, Stage.SFT)


def cmd_eval(args) -> int:
    run = _load_run(args)
    model, enc = _initial(run, args.init)
    text = float(evaluate(model, None, _text_spec(run)))
    print(f"text_loss={text!r}")
    if args.text_only:
        return 0
    for src in run.sources:
        value = float(evaluate(model, enc, src.spec))
        try:
            blind = float(entropy_floor(src.spec, visual_access=False))
            seen = float(entropy_floor(src.spec, visual_access=True))
            print(f"{src.name}_loss={value!r} floor_no_visual={blind!r} floor_visual={seen!r}")
        except NotEnumerableError:
            print(f"{src.name}_loss={value!r}")
    return 0


def cmd_gradcheck(args) -> int:
    run = _load_run(args)
    seed = run.seed if args.seed is not None else 7
    if args.config:
        model, enc, batch = desk_setup(seed, cfg=run.model, vision=run.vision)
    else:  # default desk model: 2 layers, d_model 8, rank 4
        model, enc, batch = desk_setup(seed, rank=run.model.plora_rank if args.rank is not None else 4)
    report = check_model_gradients(model, enc, batch, max_coords=args.coords, seed=seed)
    print(f"max_rel_error={report.max_rel_error:.3e} worst={report.worst} coords={report.n_coords}")
    return 0 if report.max_rel_error < GRADCHECK_TOL else 1


def cmd_merge(args) -> int:
    run = _load_run(args)
    model, _ = _initial(run, args.init)
    out = Path(run.out_dir)
    path = out / "merged.plckp"
    write_tensors(path, merged_tensors(model))
    sidecar(path).write_text(json.dumps({"merged": True, "model": model.cfg.to_dict()}, indent=1,
                                        sort_keys=True))
    print(f"merged checkpoint: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int, help="schedule length (total steps)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--rank", type=int, help="override plora_rank")
        p.add_argument("--init", help="start from this checkpoint instead of a fresh base model")
        return p

    common(sub.add_parser("pretrain", help="stage 1: frozen LLM, train vision + adapters")).set_defaults(fn=cmd_pretrain)
    common(sub.add_parser("sft", help="stage 2: train everything, scaled LLM learning rate")).set_defaults(fn=cmd_sft)
    p = common(sub.add_parser("eval", help="report losses against entropy floors"))
    p.add_argument("--text-only", action="store_true")
    p.set_defaults(fn=cmd_eval)
    p = common(sub.add_parser("gradcheck", help="finite-difference check of all gradients"))
    p.add_argument("--coords", type=int, default=6, help="entries checked per tensor")
    p.set_defaults(fn=cmd_gradcheck)
    common(sub.add_parser("merge", help="write dense merged visual/text weights")).set_defaults(fn=cmd_merge)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.fn(args)
    except (ConfigError, ContractError, FormatError, TrainingAborted, NonFiniteError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
