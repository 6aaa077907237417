"""Multi-branch joint training.

The loss is one cross-entropy term for the main prediction plus one per side
branch, each averaged over batch and points. Parameters used by several
branches (the shared encoder path) collect the sum of every dependent term's
gradient, which is what `shared_path_gradients` reports.
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from . import numerics as nx
from . import metrics, storage
from .dmifmodel import MAIN_BRANCH, BranchOutputs, DmifNet
from .errors import ConfigError, NonFiniteError, TrainingDivergedError
from .logs import JsonLinesWriter
from .models import (
    AblationSummary, AblationVariant, EvalConfig, FusionMode, MainTerm, MetricsReport, ModelConfig, Split, TrainConfig,
)
from .numerics import SHARED, Adam, AdamState, Tensor

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "model.dmif"
TRAIN_LOG = "train_log.jsonl"
CHECKPOINT_PATTERN = "checkpoint_*.dmif"
REPORT_NAME = "report.json"
ABLATION_TABLE = "ablation.csv"
ABLATION_SUMMARY = "ablation.json"
ADAM_PREFIX = "__adam__/"

VARIANT_MODELS: Dict[AblationVariant, Dict] = {
    AblationVariant.B0: {"branches": (0,), "fusion": FusionMode.FIXED},
    AblationVariant.B0_B1_B2: {"branches": (0, 1, 2), "fusion": FusionMode.MEAN},
    AblationVariant.B0_B1_B2_PMM: {"branches": (0, 1, 2), "fusion": FusionMode.GATE},
    AblationVariant.FULL: {"branches": (0, 1, 2, 3), "fusion": FusionMode.GATE},
}


def resolve_variant(name: Union[str, AblationVariant]) -> AblationVariant:
    try:
        return AblationVariant(name)
    except ValueError:
        valid = ", ".join(v.value for v in AblationVariant)
        raise ConfigError(f"Unknown ablation variant '{name}' (expected one of: {valid})") from None


def variant_config(variant: Union[str, AblationVariant], base: ModelConfig) -> ModelConfig:
    variant = resolve_variant(variant)
    return ModelConfig.model_validate({**base.model_dump(), **VARIANT_MODELS[variant]})


# Loss

@dataclass
class LossTerms:
    total: Tensor
    main: Tensor
    sides: Dict[int, Tensor]

    def as_floats(self) -> Dict[str, float]:
        values = {"loss": self.total.item(), "main": self.main.item()}
        values.update({f"side-{b}": t.item() for b, t in self.sides.items()})
        return values


def check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("occupancy labels must be 0 or 1")
    return labels


def loss(outputs: BranchOutputs, labels: np.ndarray, main_weight: float = 1.0, side_weight: float = 1.0,
         main_term: MainTerm = MainTerm.MIXED, eps: float = 1e-7) -> LossTerms:
    """Main cross-entropy (on the mixed or raw main probability) plus one term per side branch"""
    labels = check_labels(labels)
    if MainTerm(main_term) == MainTerm.MIXED:
        if outputs.mixed is None:
            raise ValueError("mixed main term needs mixed outputs; call mix() first")
        main_probs = outputs.mixed
    else:
        main_probs = outputs.branch(MAIN_BRANCH)
    main = nx.binary_cross_entropy(main_probs, labels, eps)
    sides = {b: nx.binary_cross_entropy(outputs.branch(b), labels, eps)
             for b in outputs.branch_ids if b != MAIN_BRANCH}
    total = main * main_weight
    for term in sides.values():
        total = total + term * side_weight
    return LossTerms(total=total, main=main, sides=sides)


def loss_for(outputs: BranchOutputs, labels: np.ndarray, config: TrainConfig) -> LossTerms:
    return loss(outputs, labels, config.main_weight, config.side_weight, config.main_term)


# Batches

@dataclass
class Batch:
    images: np.ndarray                 # [B,3,H,W]
    dog_images: Optional[np.ndarray]   # [B,4,H,W] when branch III is active
    points: np.ndarray                 # [B,K,3]
    labels: np.ndarray                 # [B,K]
    shape_ids: List[str]


class BatchLoader:
    """Seeded minibatches with per-sample point subsets; optional background prefetch"""

    def __init__(self, dataset: storage.ShapeDataset, batch_size: int, points_per_step: int, seed: int,
                 model: Optional[DmifNet] = None, prefetch: int = 0):
        if len(dataset) < batch_size:
            raise ConfigError(f"dataset has {len(dataset)} samples, fewer than batch size {batch_size}")
        stored = dataset.points_per_shape
        if points_per_step > stored:
            raise ConfigError(f"points_per_step {points_per_step} exceeds the {stored} stored points per shape")
        self.dataset = dataset
        self.batch_size = batch_size
        self.points_per_step = points_per_step
        self.seed = seed
        self.model = model
        self.prefetch = prefetch
        self._dog_cache: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.dataset) // self.batch_size

    def _dog(self, index: int) -> np.ndarray:
        if index not in self._dog_cache:
            self._dog_cache[index] = self.model.dog_images(self.dataset[index].image)[0]
        return self._dog_cache[index]

    def _assemble(self, indices: np.ndarray, rng: np.random.Generator) -> Batch:
        samples = [self.dataset[int(i)] for i in indices]
        subsets = [rng.choice(len(s.points), size=self.points_per_step, replace=False) for s in samples]
        needs_dog = self.model is not None and 3 in self.model.branch_ids
        return Batch(
            images=np.stack([s.image for s in samples]),
            dog_images=np.stack([self._dog(int(i)) for i in indices]) if needs_dog else None,
            points=np.stack([s.points[idx] for s, idx in zip(samples, subsets)]),
            labels=np.stack([s.labels[idx] for s, idx in zip(samples, subsets)]),
            shape_ids=[s.shape_id for s in samples],
        )

    def _batches(self, epoch: int) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.dataset))
        for b in range(len(self)):
            yield self._assemble(order[b * self.batch_size:(b + 1) * self.batch_size], rng)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        if self.prefetch <= 0:
            yield from self._batches(epoch)
            return
        handoff: "queue.Queue" = queue.Queue(maxsize=self.prefetch)
        done = object()
        stop = threading.Event()

        def produce():
            try:
                for batch in self._batches(epoch):
                    if stop.is_set():
                        return
                    handoff.put(batch)
                handoff.put(done)
            except Exception as exc:  # handed to the consumer
                handoff.put(exc)

        worker = threading.Thread(target=produce, name=f"batch-loader-{epoch}", daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is done:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    handoff.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)


# Shared-path gradients

@dataclass
class SharedPathReport:
    total: Dict[str, np.ndarray]
    per_term: Dict[str, Dict[str, np.ndarray]]
    max_residual: float

    def term_norm(self, term: str, name: str) -> float:
        return float(np.linalg.norm(self.per_term[term][name]))


def shared_path_gradients(model: DmifNet, batch: Batch, config: TrainConfig) -> SharedPathReport:
    """Per-term gradients of every shared parameter and their deviation from the total gradient"""
    params = model.parameter_set()
    shared = params.with_tag(SHARED)
    outputs = model(batch.images, batch.dog_images, batch.points)
    terms = loss_for(outputs, batch.labels, config)
    weighted = {"main": terms.main * config.main_weight}
    weighted.update({f"side-{b}": t * config.side_weight for b, t in terms.sides.items()})

    def grads_of(tensor: Tensor, retain: bool) -> Dict[str, np.ndarray]:
        model.zero_grad()
        nx.backward(tensor, retain_graph=retain)
        return {name: params[name].grad.copy() for name in shared}

    per_term = {label: grads_of(t, retain=True) for label, t in weighted.items()}
    total = grads_of(terms.total, retain=False)
    residual = 0.0
    for name in shared:
        summed = sum(per_term[label][name] for label in per_term)
        residual = max(residual, float(np.max(np.abs(total[name] - summed))) if total[name].size else 0.0)
    return SharedPathReport(total=total, per_term=per_term, max_residual=residual)


# Checkpoints

@dataclass
class Checkpoint:
    model: DmifNet
    header: Dict
    adam: Optional[AdamState] = None


def save_checkpoint(path: Union[str, Path], model: DmifNet, optimizer: Optional[Adam] = None, step: int = 0,
                    final: bool = False, train_config: Optional[TrainConfig] = None,
                    variant: Optional[AblationVariant] = None) -> Path:
    header = {
        "model": model.config.model_dump(mode="json"),
        "seed": model.seed,
        "step": step,
        "final": final,
        "variant": variant.value if variant is not None else None,
        "train": train_config.model_dump(mode="json") if train_config is not None else None,
    }
    tensors = model.state_dict()
    if optimizer is not None:
        state = optimizer.state
        tensors[f"{ADAM_PREFIX}step"] = np.array(state.step, dtype=np.int64)
        tensors[f"{ADAM_PREFIX}hparams"] = np.array([state.learning_rate, state.beta1, state.beta2, state.eps])
        for name, m in state.first_moment.items():
            tensors[f"{ADAM_PREFIX}m/{name}"] = m
        for name, v in state.second_moment.items():
            tensors[f"{ADAM_PREFIX}v/{name}"] = v
    storage.write_checkpoint(path, header, tensors)
    return Path(path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, tensors = storage.read_checkpoint(path)
    config = ModelConfig.model_validate(header["model"])
    with nx.precision(config.precision.value):
        model = DmifNet(config, seed=header.get("seed", 0))
    model_state = {k: v for k, v in tensors.items() if not k.startswith(ADAM_PREFIX)}
    model.load_state_dict(model_state)
    adam = None
    if f"{ADAM_PREFIX}step" in tensors:
        lr, b1, b2, eps = (float(v) for v in tensors[f"{ADAM_PREFIX}hparams"])
        adam = AdamState(learning_rate=lr, beta1=b1, beta2=b2, eps=eps, step=int(tensors[f"{ADAM_PREFIX}step"]))
        for key, value in tensors.items():
            if key.startswith(f"{ADAM_PREFIX}m/"):
                adam.first_moment[key[len(ADAM_PREFIX) + 2:]] = value
            elif key.startswith(f"{ADAM_PREFIX}v/"):
                adam.second_moment[key[len(ADAM_PREFIX) + 2:]] = value
    model.eval()
    return Checkpoint(model=model, header=header, adam=adam)


def load_model(path: Union[str, Path]) -> DmifNet:
    return load_checkpoint(path).model


# Training

@dataclass
class TrainResult:
    checkpoint: Path
    steps: int
    final_loss: float
    losses: List[float] = field(default_factory=list)


def _as_dataset(data: Union[str, Path, storage.ShapeDataset], split: Split) -> storage.ShapeDataset:
    return data if isinstance(data, storage.ShapeDataset) else storage.ShapeDataset(data, split)


def validation_loss(model: DmifNet, dataset: Union[str, Path, storage.ShapeDataset], config: TrainConfig,
                    seed: int = 0) -> float:
    """Mean loss over the split in inference mode, each sample on a seeded point subset"""
    dataset = _as_dataset(dataset, Split.TEST)
    rng = np.random.default_rng(seed)
    was_training = model.training
    model.eval()
    values = []
    try:
        with nx.no_grad():
            for i in range(len(dataset)):
                sample = dataset[i]
                count = min(config.validation_points, len(sample.points))
                idx = rng.choice(len(sample.points), size=count, replace=False)
                outputs = model(sample.image, None, sample.points[idx])
                values.append(loss_for(outputs, sample.labels[idx][None], config).total.item())
    finally:
        model.train(was_training)
    return float(np.mean(values)) if values else float("nan")


def train(data: Union[str, Path, storage.ShapeDataset], config: TrainConfig, out_dir: Union[str, Path],
          force: bool = False, variant: Optional[AblationVariant] = None, prefetch: Optional[int] = None) -> TrainResult:
    out = Path(out_dir)
    final_path = storage.ensure_writable(out / FINAL_CHECKPOINT, force)
    log_path = storage.ensure_writable(out / TRAIN_LOG, force)
    stale = sorted(out.glob(CHECKPOINT_PATTERN))
    if stale and not force:
        raise FileExistsError(f"{stale[0]} already exists (use --force to overwrite)")
    dataset = _as_dataset(data, Split.TRAIN)

    with nx.precision(config.model.precision.value):
        model = DmifNet(config.model, seed=config.seed)
        params = model.parameter_set()
        optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        loader = BatchLoader(dataset, config.batch_size, config.points_per_step, config.seed, model,
                             prefetch=config.prefetch if prefetch is None else prefetch)
        logger.info("Training started", extra={"fields": {
            "shapes": len(dataset), "parameters": sum(p.size for _, p in params.items()),
            "branches": list(model.branch_ids), "fusion": config.model.fusion.value,
            "variant": variant.value if variant else None,
        }})

        losses: List[float] = []
        step = 0
        started = time.perf_counter()
        with JsonLinesWriter(log_path) as train_log:
            for epoch in range(config.epochs):
                for batch in loader.epoch(epoch):
                    optimizer.zero_grad()
                    try:
                        outputs = model(batch.images, batch.dog_images, batch.points)
                        terms = loss_for(outputs, batch.labels, config)
                        nx.backward(terms.total)
                    except NonFiniteError:
                        raise TrainingDivergedError(step + 1, float("nan")) from None
                    record = terms.as_floats()
                    if not np.isfinite(record["loss"]):
                        raise TrainingDivergedError(step + 1, record["loss"])
                    optimizer.step()
                    step += 1
                    losses.append(record["loss"])
                    train_log.write({"step": step, "epoch": epoch, **record,
                                     "wall_time": round(time.perf_counter() - started, 4)})
                    if step % config.checkpoint_every == 0:
                        periodic = storage.ensure_writable(out / f"checkpoint_{step:06d}.dmif", force)
                        save_checkpoint(periodic, model, optimizer, step, False, config, variant)
                        logger.info("Checkpoint written", extra={"fields": {"step": step, "loss": record["loss"]}})
                    if config.max_steps is not None and step >= config.max_steps:
                        break
                else:
                    logger.info("Epoch finished", extra={"fields": {"epoch": epoch, "step": step,
                                                                    "loss": losses[-1] if losses else None}})
                    continue
                break

        save_checkpoint(final_path, model, optimizer, step, True, config, variant)
    final_loss = losses[-1] if losses else float("nan")
    logger.info("Training finished", extra={"fields": {"steps": step, "loss": final_loss, "checkpoint": str(final_path)}})
    return TrainResult(checkpoint=final_path, steps=step, final_loss=final_loss, losses=losses)


def ablate(data: Union[str, Path, storage.ShapeDataset], config: TrainConfig, variant: Union[str, AblationVariant],
           out_dir: Union[str, Path], force: bool = False, seed: Optional[int] = None) -> TrainResult:
    """Train the reduced model named by `variant` into <out_dir>/<variant>/, or .../seed_<n>/ for an explicit seed"""
    variant = resolve_variant(variant)
    update: Dict = {"model": variant_config(variant, config.model)}
    target = Path(out_dir) / variant.value
    if seed is not None:
        update["seed"] = seed
        target = target / f"seed_{seed}"
    return train(data, config.model_copy(update=update), target, force=force, variant=variant)


@dataclass
class AblationStudy:
    runs: Dict[str, Dict[int, TrainResult]]
    reports: Dict[str, Dict[int, MetricsReport]] = field(default_factory=dict)
    summary: Optional[AblationSummary] = None


def ablation_study(data: Union[str, Path], config: TrainConfig, variants: Sequence[Union[str, AblationVariant]],
                   seeds: Sequence[int], out_dir: Union[str, Path], eval_config: Optional[EvalConfig] = None,
                   force: bool = False, threads: int = 1) -> AblationStudy:
    """Train every variant under every seed.

    With `eval_config` each run is scored on the test split into
    <variant>/seed_<n>/report.json, and the seed means go to ablation.csv and
    ablation.json together with the ordering check.
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    out = Path(out_dir)
    variants = [resolve_variant(v) for v in variants]
    table_path = summary_path = None
    if eval_config is not None:
        table_path = storage.ensure_writable(out / ABLATION_TABLE, force)
        summary_path = storage.ensure_writable(out / ABLATION_SUMMARY, force)

    study = AblationStudy(runs={v.value: {} for v in variants})
    for variant in variants:
        for seed in seeds:
            result = ablate(data, config, variant, out, force=force, seed=seed)
            study.runs[variant.value][seed] = result
            if eval_config is None:
                continue
            model = load_model(result.checkpoint)
            with nx.precision(model.config.precision.value):
                report = metrics.evaluate(model, data, eval_config, checkpoint=str(result.checkpoint),
                                          split=Split.TEST, threads=threads)
            report_path = storage.ensure_writable(result.checkpoint.parent / REPORT_NAME, force)
            report_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
            study.reports.setdefault(variant.value, {})[seed] = report

    if eval_config is not None:
        study.summary = metrics.ablation_table(study.reports, table_path)
        summary_path.write_text(study.summary.model_dump_json(indent=2), encoding="utf-8")
    return study
