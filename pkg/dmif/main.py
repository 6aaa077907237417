"""Command-line entry point: build-data, train, ablate, reconstruct, eval, dog-preview."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from . import metrics, storage, synthdata, trainer
from . import numerics as nx
from .dogfilter import dog_map, rescale_unit, to_grayscale
from .errors import ConfigError, DmifError
from .logs import configure_logging
from .meshing import extract_mesh, write_obj
from .models import AblationVariant, DataConfig, EvalConfig, GaussianScaleSpec, RunConfig, Split, TrainConfig

logger = logging.getLogger("dmif.main")

ConfigT = TypeVar("ConfigT", bound=BaseModel)

CONFIG_ECHO = "config.json"


# Configuration

def apply_override(data: Dict[str, Any], item: str) -> None:
    """Apply one `dotted.key=value` override; the value is parsed as JSON, else kept as a string"""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"Override '{item}' is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    node = data
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Override '{item}': '{part}' is not a section")
        node = child
    node[leaf] = value


def load_config(model_cls: Type[ConfigT], path: Optional[str], overrides: Sequence[str] = (),
                seed: Optional[int] = None, defaults: Optional[Dict[str, Any]] = None) -> ConfigT:
    data: Dict[str, Any] = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seed"] = seed
    for key, value in (defaults or {}).items():
        section, _, leaf = key.rpartition(".")
        node = data.setdefault(section, {}) if section else data
        node.setdefault(leaf, value)
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid {model_cls.__name__}: {exc}") from exc


def _write_echo(path: Path, payload: Dict[str, Any], force: bool) -> Path:
    path = storage.ensure_writable(path, force)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def echo_config(out_dir: Path, payload: Dict[str, Any], force: bool) -> Path:
    return _write_echo(out_dir / CONFIG_ECHO, payload, force)


def echo_path(out_file: Union[str, Path]) -> Path:
    """Echo location for single-file outputs: mesh.obj -> mesh.config.json"""
    out_file = Path(out_file)
    return out_file.with_name(f"{out_file.stem}.{CONFIG_ECHO}")


def echo_beside(out_file: Union[str, Path], payload: Dict[str, Any], force: bool) -> Path:
    return _write_echo(echo_path(out_file), payload, force)


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get("DMIF_THREADS")
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"DMIF_THREADS must be an integer, got '{raw}'") from None
    if threads < 1:
        raise ConfigError("DMIF_THREADS must be at least 1")
    return threads


def _precision_default() -> Dict[str, Any]:
    env = os.environ.get("DMIF_PRECISION")
    return {"model.precision": env} if env else {}


def _run_config(args: argparse.Namespace, threads: int) -> RunConfig:
    return RunConfig(subcommand=args.command, config_path=getattr(args, "config", None), seed=getattr(args, "seed", None),
                     out=str(args.out), overrides=list(getattr(args, "overrides", []) or []),
                     threads=threads, force=args.force)


# Subcommands

def cmd_build_data(args: argparse.Namespace, run: RunConfig) -> None:
    config = load_config(DataConfig, args.config, run.overrides, run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, {"run": run.model_dump(mode="json"), "data": config.model_dump(mode="json")}, run.force)
    synthdata.build_dataset(config, out, threads=run.threads, force=run.force)


def cmd_train(args: argparse.Namespace, run: RunConfig) -> None:
    config = load_config(TrainConfig, args.config, run.overrides, run.seed, _precision_default())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, {"run": run.model_dump(mode="json"), "data": str(args.data),
                      "train": config.model_dump(mode="json")}, run.force)
    trainer.train(args.data, config, out, force=run.force, prefetch=None if run.threads > 1 else 0)


def cmd_ablate(args: argparse.Namespace, run: RunConfig) -> None:
    config = load_config(TrainConfig, args.config, run.overrides, run.seed, _precision_default())
    variants = list(AblationVariant) if args.variant == "all" else [trainer.resolve_variant(args.variant)]
    seeds = args.seeds if args.seeds else [config.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eval_config = load_config(EvalConfig, args.eval_config) if args.evaluate else None
    echo_config(out, {"run": run.model_dump(mode="json"), "data": str(args.data),
                      "variants": [v.value for v in variants], "seeds": seeds, "train": config.model_dump(mode="json"),
                      "eval": eval_config.model_dump(mode="json") if eval_config else None}, run.force)
    study = trainer.ablation_study(args.data, config, variants, seeds, out, eval_config,
                                   force=run.force, threads=run.threads)
    if study.summary is not None and not study.summary.ordering_holds:
        print(json.dumps({"ordering_holds": False, "violations": study.summary.violations}), file=sys.stderr)


def cmd_reconstruct(args: argparse.Namespace, run: RunConfig) -> None:
    out = storage.ensure_writable(args.out, run.force)
    model = trainer.load_model(args.checkpoint)
    image = storage.read_image(args.image)
    echo_beside(out, {"run": run.model_dump(mode="json"), "checkpoint": str(args.checkpoint),
                      "image": str(args.image), "resolution": args.resolution, "threshold": args.threshold,
                      "model": model.config.model_dump(mode="json")}, run.force)
    with nx.precision(model.config.precision.value):
        mesh = extract_mesh(model, image, args.resolution, args.threshold)
    write_obj(out, mesh)
    logger.info("Mesh written", extra={"fields": {"out": str(out), "vertices": len(mesh.vertices),
                                                  "faces": len(mesh.faces)}})


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> None:
    if args.checkpoint is None and not args.oracle:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    config = load_config(EvalConfig, args.config, run.overrides, run.seed)
    out = storage.ensure_writable(args.out, run.force)
    csv_path = storage.ensure_writable(args.csv, run.force) if args.csv else None
    echo_beside(out, {"run": run.model_dump(mode="json"), "checkpoint": args.checkpoint, "oracle": args.oracle,
                      "data": str(args.data), "split": args.split, "eval": config.model_dump(mode="json")}, run.force)
    model = trainer.load_model(args.checkpoint) if args.checkpoint else None
    report = metrics.evaluate(model, args.data, config, checkpoint=str(args.checkpoint or "oracle"),
                              split=Split(args.split), oracle=args.oracle, threads=run.threads)
    out.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    if csv_path is not None:
        metrics.write_report_csv(report, csv_path)


def cmd_dog_preview(args: argparse.Namespace, run: RunConfig) -> None:
    out = storage.ensure_writable(args.out, run.force)
    spec = GaussianScaleSpec(sigmas=args.sigmas) if args.sigmas else GaussianScaleSpec()
    echo_beside(out, {"run": run.model_dump(mode="json"), "image": str(args.image),
                      "dog": spec.model_dump(mode="json"), "pair_index": args.pair_index}, run.force)
    dog = dog_map(to_grayscale(storage.read_image(args.image)), spec, args.pair_index)
    storage.write_image(out, rescale_unit(dog.values)[None])


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], None]] = {
    "build-data": cmd_build_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "dog-preview": cmd_dog_preview,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (or file for reconstruct/eval/dog-preview)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="worker threads (env DMIF_THREADS, default 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--log-file", default=None)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    configurable = argparse.ArgumentParser(add_help=False)
    configurable.add_argument("--config", default=None, help="JSON configuration file")
    configurable.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                              help="override a config value (dotted keys, JSON values)")

    parser = argparse.ArgumentParser(prog="dmif", description="Single-view occupancy reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-data", parents=[common, configurable], help="generate the synthetic dataset")

    p = sub.add_parser("train", parents=[common, configurable], help="train the full model")
    p.add_argument("--data", default="data", help="dataset directory")

    p = sub.add_parser("ablate", parents=[common, configurable], help="train reduced models")
    p.add_argument("--data", default="data")
    p.add_argument("--variant", default="all", choices=["all"] + [v.value for v in AblationVariant])
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="train every variant once per seed")
    p.add_argument("--evaluate", action="store_true", help="evaluate each variant and write ablation.csv")
    p.add_argument("--eval-config", default=None)

    p = sub.add_parser("reconstruct", parents=[common], help="image -> OBJ mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("eval", parents=[common, configurable], help="metrics on a dataset split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default=Split.TEST.value, choices=[s.value for s in Split])
    p.add_argument("--csv", default=None, help="also write the per-kind table as CSV")
    p.add_argument("--oracle", action="store_true", help="score the exact-SDF occupancy instead of a model")

    p = sub.add_parser("dog-preview", parents=[common], help="write the DoG map of an image as grayscale PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--sigmas", type=float, nargs="+", default=None)
    p.add_argument("--pair-index", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_level, args.log_file)
    try:
        run = _run_config(args, resolve_threads(args.threads))
        COMMANDS[args.command](args, run)
    except (DmifError, OSError, ValueError, LookupError) as exc:
        logger.error("Command failed", extra={"fields": {"command": args.command, "error": type(exc).__name__,
                                                        "detail": str(exc)}})
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
