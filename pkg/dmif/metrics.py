"""Reconstruction metrics: volumetric IoU, Chamfer-L1 and normal consistency."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from . import meshing
from .models import (
    AblationSummary, AblationVariant, AggregateMetrics, EvalConfig, MetricsReport, PrimitiveKind, SampleMetrics,
    ShapeSpec, Split, VariantSummary,
)
from .storage import ShapeDataset
from .synthdata import ShapeOracle, shape_factory

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-4


class NearestNeighborIndex:
    """Immutable k-d tree over a point set, with optional per-point normals"""

    def __init__(self, points: np.ndarray, normals: Optional[np.ndarray] = None):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValueError(f"index needs a non-empty [N,3] point set, got {self.points.shape}")
        self.normals = None if normals is None else np.asarray(normals, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance to and index of the nearest member for every query"""
        distances, indices = self.tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return distances, indices


def iou(pred_occupancy: np.ndarray, gt_labels: np.ndarray, tau: float = 0.5) -> float:
    """|R n G| / |R u G| over shared evaluation points; 1.0 when both sets are empty"""
    pred_occupancy = np.asarray(pred_occupancy)
    gt = np.asarray(gt_labels).astype(bool)
    if pred_occupancy.shape != gt.shape:
        raise ValueError(f"prediction {pred_occupancy.shape} and labels {gt.shape} differ in shape")
    if gt.size == 0:
        raise ValueError("IoU needs at least one evaluation point")
    pred = pred_occupancy if pred_occupancy.dtype == bool else pred_occupancy > tau
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def _check_points(points: np.ndarray, name: str) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError(f"{name} must be a non-empty [N,3] point set, got {points.shape}")
    return points


def chamfer_terms(pred_points: np.ndarray, gt_points: np.ndarray) -> Tuple[float, float]:
    """(mean pred->gt distance, mean gt->pred distance)"""
    pred = _check_points(pred_points, "predicted points")
    gt = _check_points(gt_points, "ground-truth points")
    pred_to_gt, _ = NearestNeighborIndex(gt).query(pred)
    gt_to_pred, _ = NearestNeighborIndex(pred).query(gt)
    return float(pred_to_gt.mean()), float(gt_to_pred.mean())


def chamfer_l1(pred_points: np.ndarray, gt_points: np.ndarray) -> float:
    return sum(chamfer_terms(pred_points, gt_points))


def _check_unit(normals: np.ndarray, points: np.ndarray, name: str) -> np.ndarray:
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != points.shape:
        raise ValueError(f"{name} normals {normals.shape} do not match points {points.shape}")
    if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > UNIT_TOLERANCE):
        raise ValueError(f"{name} normals must have unit length")
    return normals


def normal_consistency_terms(pred_points: np.ndarray, pred_normals: np.ndarray,
                             gt_points: np.ndarray, gt_normals: np.ndarray) -> Tuple[float, float]:
    """(mean |r.g| from pred to nearest gt, and the reverse)"""
    pred = _check_points(pred_points, "predicted points")
    gt = _check_points(gt_points, "ground-truth points")
    pred_n = _check_unit(pred_normals, pred, "predicted")
    gt_n = _check_unit(gt_normals, gt, "ground-truth")
    _, nearest_gt = NearestNeighborIndex(gt).query(pred)
    _, nearest_pred = NearestNeighborIndex(pred).query(gt)
    forward = np.abs(np.einsum("ij,ij->i", pred_n, gt_n[nearest_gt])).mean()
    reverse = np.abs(np.einsum("ij,ij->i", gt_n, pred_n[nearest_pred])).mean()
    return float(min(forward, 1.0)), float(min(reverse, 1.0))


def normal_consistency(pred_points: np.ndarray, pred_normals: np.ndarray,
                       gt_points: np.ndarray, gt_normals: np.ndarray) -> float:
    """Average of the two directional means, so the result lies in [0,1]"""
    forward, reverse = normal_consistency_terms(pred_points, pred_normals, gt_points, gt_normals)
    return 0.5 * (forward + reverse)


def ground_truth_surface(spec: ShapeSpec, n: int, seed: Optional[int] = None,
                         resolution: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """Surface samples and normals of a fine mesh extracted from the exact SDF"""
    mesh = meshing.extract_mesh(ShapeOracle(spec, resolution), None, resolution)
    return meshing.sample_surface(mesh, n, seed)


# Evaluation

def _sample_seeds(seed: int, index: int) -> Tuple[np.random.Generator, int, int]:
    rng = np.random.default_rng([seed, index])
    pred_seed, gt_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    return rng, pred_seed, gt_seed


def evaluate_sample(predictor: meshing.OccupancyPredictor, image: Optional[np.ndarray], spec: ShapeSpec,
                    config: EvalConfig, shape_id: str, kind: PrimitiveKind, index: int = 0) -> SampleMetrics:
    rng, pred_seed, gt_seed = _sample_seeds(config.seed, index)
    points = rng.uniform(-0.5, 0.5, size=(config.iou_points, 3))
    labels = shape_factory.sdf(spec, points) < 0
    occupancy = predictor.predict_occupancy(image, points, config.chunk_size)
    row = {"shape_id": shape_id, "kind": kind, "iou": iou(occupancy, labels, config.threshold)}

    mesh = meshing.extract_mesh(predictor, image, config.resolution, config.threshold, config.chunk_size)
    if mesh.is_empty:
        logger.warning("Empty reconstruction", extra={"fields": {"shape_id": shape_id}})
        return SampleMetrics(**row, empty_mesh=True)
    pred_points, pred_normals = meshing.sample_surface(mesh, config.surface_points, pred_seed)
    gt_points, gt_normals = ground_truth_surface(spec, config.surface_points, gt_seed, config.gt_resolution)
    cd_forward, cd_reverse = chamfer_terms(pred_points, gt_points)
    nc_forward, nc_reverse = normal_consistency_terms(pred_points, pred_normals, gt_points, gt_normals)
    return SampleMetrics(
        **row,
        normal_consistency=0.5 * (nc_forward + nc_reverse),
        chamfer_l1=cd_forward + cd_reverse,
        normal_consistency_pred_to_gt=nc_forward,
        normal_consistency_gt_to_pred=nc_reverse,
        chamfer_pred_to_gt=cd_forward,
        chamfer_gt_to_pred=cd_reverse,
    )


def aggregate(group: str, rows: Sequence[SampleMetrics]) -> AggregateMetrics:
    meshed = [r for r in rows if not r.empty_mesh]
    return AggregateMetrics(
        group=group,
        count=len(rows),
        meshed_count=len(meshed),
        iou=float(np.mean([r.iou for r in rows])) if rows else 0.0,
        normal_consistency=float(np.mean([r.normal_consistency for r in meshed])) if meshed else None,
        chamfer_l1=float(np.mean([r.chamfer_l1 for r in meshed])) if meshed else None,
    )


def evaluate(predictor: Optional[meshing.OccupancyPredictor], dataset: Union[str, Path, ShapeDataset],
             config: EvalConfig, checkpoint: str = "", split: Split = Split.TEST, oracle: bool = False,
             threads: int = 1) -> MetricsReport:
    """Per-sample metrics on a split plus per-kind and overall means.

    With `oracle=True` the exact-SDF occupancy replaces the network, which gives
    the upper bound reachable at the configured grid resolution.
    """
    if not isinstance(dataset, ShapeDataset):
        dataset = ShapeDataset(dataset, split)
    if predictor is None and not oracle:
        raise ValueError("evaluate needs a predictor unless oracle=True")
    if hasattr(predictor, "eval"):
        predictor.eval()

    def run(index: int) -> SampleMetrics:
        entry = dataset.entries[index]
        model = ShapeOracle(entry.shape, config.resolution) if oracle else predictor
        image = dataset[index].image
        return evaluate_sample(model, image, entry.shape, config, entry.shape_id, entry.kind, index)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        samples = list(pool.map(run, range(len(dataset))))

    per_kind = [aggregate(kind.value, [s for s in samples if s.kind == kind])
                for kind in PrimitiveKind if any(s.kind == kind for s in samples)]
    report = MetricsReport(checkpoint=checkpoint, split=split, samples=samples, per_kind=per_kind,
                           overall=aggregate("overall", samples), config=config)
    logger.info("Evaluation finished", extra={"fields": {
        "samples": len(samples), "iou": report.overall.iou,
        "normal_consistency": report.overall.normal_consistency, "chamfer_l1": report.overall.chamfer_l1,
    }})
    return report


# Tables

REPORT_COLUMNS = ["group", "count", "meshed_count", "iou", "normal_consistency", "chamfer_l1"]
ABLATION_COLUMNS = ["variant", "seed", "iou", "normal_consistency", "chamfer_l1"]
# weakest first; each variant may trail its predecessor by at most the slack
ABLATION_ORDER = (AblationVariant.B0, AblationVariant.B0_B1_B2, AblationVariant.B0_B1_B2_PMM, AblationVariant.FULL)
ABLATION_SLACK = 0.005

AblationRuns = Mapping[str, Mapping[int, MetricsReport]]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def report_rows(report: MetricsReport) -> List[Dict[str, str]]:
    rows = []
    for agg in list(report.per_kind) + [report.overall]:
        rows.append({"group": agg.group, "count": str(agg.count), "meshed_count": str(agg.meshed_count),
                     "iou": _fmt(agg.iou), "normal_consistency": _fmt(agg.normal_consistency),
                     "chamfer_l1": _fmt(agg.chamfer_l1)})
    return rows


def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def ablation_summary(runs: AblationRuns, slack: float = ABLATION_SLACK) -> AblationSummary:
    """Seed means per variant and every ordering step that drops by more than `slack` IoU"""
    summaries: Dict[AblationVariant, VariantSummary] = {}
    for name, by_seed in runs.items():
        variant = AblationVariant(name)
        if not by_seed:
            raise ValueError(f"variant '{variant.value}' has no evaluated seeds")
        seeds = sorted(by_seed)
        overall = [by_seed[s].overall for s in seeds]
        summaries[variant] = VariantSummary(
            variant=variant, seeds=seeds, iou=float(np.mean([o.iou for o in overall])),
            normal_consistency=_mean_or_none([o.normal_consistency for o in overall]),
            chamfer_l1=_mean_or_none([o.chamfer_l1 for o in overall]),
        )
    present = [v for v in ABLATION_ORDER if v in summaries]
    violations = []
    for weaker, stronger in zip(present, present[1:]):
        low, high = summaries[weaker].iou, summaries[stronger].iou
        if high < low - slack:
            violations.append(f"{stronger.value} IoU {high:.4f} is below {weaker.value} IoU {low:.4f}")
    return AblationSummary(variants=[summaries[v] for v in present], slack=slack, violations=violations)


def ablation_rows(runs: AblationRuns, summary: AblationSummary) -> List[Dict[str, str]]:
    rows = []
    for name, by_seed in runs.items():
        for seed in sorted(by_seed):
            r = by_seed[seed].overall
            rows.append({"variant": AblationVariant(name).value, "seed": str(seed), "iou": _fmt(r.iou),
                         "normal_consistency": _fmt(r.normal_consistency), "chamfer_l1": _fmt(r.chamfer_l1)})
    for s in summary.variants:
        rows.append({"variant": s.variant.value, "seed": "mean", "iou": _fmt(s.iou),
                     "normal_consistency": _fmt(s.normal_consistency), "chamfer_l1": _fmt(s.chamfer_l1)})
    return rows


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Mapping[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


def write_report_csv(report: MetricsReport, path: Union[str, Path]) -> None:
    write_csv(path, REPORT_COLUMNS, report_rows(report))


def ablation_table(runs: AblationRuns, path: Union[str, Path], slack: float = ABLATION_SLACK) -> AblationSummary:
    """Write one row per (variant, seed) plus one mean row per variant; returns the ordering check"""
    summary = ablation_summary(runs, slack)
    write_csv(path, ABLATION_COLUMNS, ablation_rows(runs, summary))
    if summary.violations:
        logger.warning("Ablation ordering violated", extra={"fields": {"violations": summary.violations}})
    else:
        logger.info("Ablation ordering holds", extra={"fields": {
            "variants": [s.variant.value for s in summary.variants], "slack": slack}})
    return summary
