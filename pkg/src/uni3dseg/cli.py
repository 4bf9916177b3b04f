"""Command-line entry point: gen, train, eval, predict.

Every failure exits nonzero after printing a single machine-parsable line to
stderr: ``ERROR[<CODE>] <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .containers import ContainerError
from .losses import LossError
from .metrics import MetricError
from .model import CheckpointError, load_checkpoint
from .pipeline import load_scene_dir, mix_seed, predict_scene, resolve_bank
from .queries import QueryBankError
from .scenes import ClassCatalog, SceneError, SceneSpec, generate_scene, load_scene, save_scene
from .tensor import ShapeError
from .train import evaluate_checkpoint, run_training


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def cmd_gen(args) -> int:
    if args.scenes < 1:
        raise CliError("USAGE", "--scenes must be >= 1", exit_code=2)
    try:
        spec = SceneSpec.load(args.spec)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError("CONFIG", f"bad scene spec: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.scenes):
        pc = generate_scene(spec, mix_seed(args.seed, i))
        name = f"scene_{i:05d}.u3dt"
        save_scene(out / name, pc)
        names.append(name)
    (out / "index.json").write_text(
        json.dumps({"scenes": names, "seed": args.seed, "count": args.scenes},
                   sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    outcome = run_training(config, resume=Path(args.resume) if args.resume else None,
                           eval_after=args.eval_holdout, stop_after=args.stop_after)
    print(f"checkpoint: {outcome.checkpoint_path}")
    print(f"loss log:   {outcome.log_path}")
    if "holdout_metrics" in outcome.summary:
        print(json.dumps(outcome.summary["holdout_metrics"], indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    clouds = load_scene_dir(args.scenes)
    report = evaluate_checkpoint(config, model, clouds, oracle=args.oracle)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_predict(args) -> int:
    config = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    catalog = ClassCatalog.load(config.catalog)
    bank = resolve_bank(config, catalog)
    if model.hp.num_classes != catalog.num_classes or model.hp.d_e != bank.d_e:
        raise CliError(
            "CHECKPOINT",
            f"checkpoint dimensions (C={model.hp.num_classes}, d_e={model.hp.d_e}) do not "
            f"match config (C={catalog.num_classes}, d_e={bank.d_e})",
        )
    pc = load_scene(args.scene)
    predict_scene(pc, bank, model, catalog, args.out_ply, seed=config.seed)
    print(f"wrote {args.out_ply}_semantic.ply, _instance.ply, _panoptic.ply, "
          f"_assignments.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uni3dseg",
        description="Unified 3D point-cloud segmentation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic scene files")
    gen.add_argument("--spec", required=True, help="scene spec JSON")
    gen.add_argument("--scenes", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(fn=cmd_gen)

    train = sub.add_parser("train", help="train a model from a run config")
    train.add_argument("--config", required=True)
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.add_argument("--stop-after", type=int, default=None,
                       help="interrupt after this many steps (for later resume)")
    train.add_argument("--eval-holdout", action="store_true",
                       help="evaluate the holdout split after training")
    train.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scenes", required=True)
    ev.add_argument("--oracle", action="store_true",
                    help="score ground truth against itself")
    ev.add_argument("--out", default=None, help="also write the report JSON here")
    ev.set_defaults(fn=cmd_eval)

    pred = sub.add_parser("predict", help="run one scene and export PLY visualizations")
    pred.add_argument("--config", required=True)
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--scene", required=True)
    pred.add_argument("--out-ply", required=True, help="output path prefix")
    pred.set_defaults(fn=cmd_predict)
    return parser


_ERROR_CODES = [
    (ConfigError, "CONFIG"),
    (CheckpointError, "CHECKPOINT"),
    (QueryBankError, "BANK"),
    (SceneError, "SCENE"),
    (ContainerError, "FORMAT"),
    (LossError, "LOSS"),
    (MetricError, "METRIC"),
    (ShapeError, "SHAPE"),
]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"ERROR[{exc.code}] {exc}", file=sys.stderr)
        return exc.exit_code
    except tuple(e for e, _ in _ERROR_CODES) as exc:
        code = next(c for e, c in _ERROR_CODES if isinstance(exc, e))
        print(f"ERROR[{code}] {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"ERROR[RUNTIME] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
