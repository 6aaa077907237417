from __future__ import annotations

from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

# Every solid must fit inside this cube so that jittered samples stay in [-0.55, 0.55]^3
SHAPE_BOUND = 0.45

Vec3 = Tuple[float, float, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PrimitiveKind(str, Enum):
    SPHERE = "sphere"
    BOX = "box"
    TORUS = "torus"
    CAPSULE = "capsule"
    UNION = "union"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class Precision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"


class FusionMode(str, Enum):
    GATE = "gate"    # learned probability mixture
    MEAN = "mean"    # uniform weights over active branches
    FIXED = "fixed"  # single active branch, alpha = (1,)


class MainTerm(str, Enum):
    MIXED = "mixed"
    RAW = "raw"


class AblationVariant(str, Enum):
    B0 = "b0"
    B0_B1_B2 = "b0_b1_b2"
    B0_B1_B2_PMM = "b0_b1_b2_pmm"
    FULL = "full"


# Shapes

class Pose(StrictModel):
    rotation: Vec3 = Field((0.0, 0.0, 0.0), description="xyz Euler angles in degrees")
    translation: Vec3 = (0.0, 0.0, 0.0)

    @field_validator("translation")
    @classmethod
    def translation_in_unit_cube(cls, v: Vec3) -> Vec3:
        if any(abs(c) > 0.5 for c in v):
            raise ValueError("translation must lie within [-0.5, 0.5]^3")
        return v

    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rotation, degrees=True).as_matrix()


class SphereParams(StrictModel):
    radius: float = Field(..., gt=0)

    def bounding_radius(self) -> float:
        return self.radius


class BoxParams(StrictModel):
    half_extents: Vec3

    @field_validator("half_extents")
    @classmethod
    def positive_extents(cls, v: Vec3) -> Vec3:
        if any(c <= 0 for c in v):
            raise ValueError("half extents must be positive")
        return v

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents))


class TorusParams(StrictModel):
    major_radius: float = Field(..., gt=0)
    minor_radius: float = Field(..., gt=0)

    @model_validator(mode="after")
    def ring_has_hole(self) -> "TorusParams":
        if self.minor_radius >= self.major_radius:
            raise ValueError("minor radius must be smaller than major radius")
        return self

    def bounding_radius(self) -> float:
        return self.major_radius + self.minor_radius


class CapsuleParams(StrictModel):
    radius: float = Field(..., gt=0)
    half_length: float = Field(..., gt=0, description="Half length of the core segment (local y axis)")

    def bounding_radius(self) -> float:
        return self.radius + self.half_length


class UnionParams(StrictModel):
    children: List["ShapeSpec"] = Field(..., min_length=2, max_length=2)


ShapeParams = Union[SphereParams, BoxParams, TorusParams, CapsuleParams, UnionParams]

_PARAMS_FOR_KIND = {
    PrimitiveKind.SPHERE: SphereParams,
    PrimitiveKind.BOX: BoxParams,
    PrimitiveKind.TORUS: TorusParams,
    PrimitiveKind.CAPSULE: CapsuleParams,
    PrimitiveKind.UNION: UnionParams,
}


class ShapeSpec(StrictModel):
    kind: PrimitiveKind
    params: ShapeParams
    pose: Pose = Field(default_factory=Pose)
    color: Vec3 = (0.55, 0.65, 0.85)

    @model_validator(mode="after")
    def params_match_kind_and_fit(self) -> "ShapeSpec":
        expected = _PARAMS_FOR_KIND[self.kind]
        if not isinstance(self.params, expected):
            raise ValueError(f"{self.kind.value} shapes need {expected.__name__}")
        for center, radius in self.bounding_balls():
            if np.any(np.abs(center) + radius > SHAPE_BOUND + 1e-12):
                raise ValueError(f"shape does not fit inside [-{SHAPE_BOUND}, {SHAPE_BOUND}]^3")
        return self

    def bounding_balls(self) -> List[Tuple[np.ndarray, float]]:
        """Balls in world space that together enclose the solid"""
        rot = self.pose.matrix()
        t = np.asarray(self.pose.translation, dtype=np.float64)
        if isinstance(self.params, UnionParams):
            balls = []
            for child in self.params.children:
                balls.extend((rot @ c + t, r) for c, r in child.bounding_balls())
            return balls
        return [(t, self.params.bounding_radius())]


UnionParams.model_rebuild()


class CameraSpec(StrictModel):
    azimuth: float = Field(30.0, description="Degrees around the vertical axis")
    elevation: float = Field(20.0, ge=-89.0, le=89.0)
    extent: float = Field(1.0, gt=0, description="Width of the square orthographic frame")
    distance: float = Field(2.0, gt=1.0)


# DoG preprocessing

class GaussianScaleSpec(StrictModel):
    sigmas: List[float] = Field(default_factory=lambda: [1.0, 1.6], min_length=2)
    truncate: float = Field(3.0, gt=0, description="Kernel radius in units of sigma, rounded up")

    @field_validator("sigmas")
    @classmethod
    def strictly_increasing(cls, v: List[float]) -> List[float]:
        if any(s <= 0 for s in v):
            raise ValueError("sigmas must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("sigmas must be strictly increasing")
        return v


# Configuration

def _default_counts() -> Dict[PrimitiveKind, int]:
    return {kind: 400 for kind in PrimitiveKind}


class DataConfig(StrictModel):
    counts: Dict[PrimitiveKind, int] = Field(default_factory=_default_counts)
    image_size: int = Field(64, ge=16, le=128)
    points_per_shape: int = Field(2048, ge=1)
    near_surface_fraction: float = Field(0.5, ge=0, le=1)
    surface_jitter: float = Field(0.02, ge=0)
    train_fraction: float = Field(0.8, gt=0, lt=1)
    seed: int = 0

    @field_validator("counts")
    @classmethod
    def non_negative_counts(cls, v: Dict[PrimitiveKind, int]) -> Dict[PrimitiveKind, int]:
        if any(n < 0 for n in v.values()):
            raise ValueError("shape counts must be non-negative")
        if sum(v.values()) == 0:
            raise ValueError("dataset needs at least one shape")
        return v


class ModelConfig(StrictModel):
    image_size: int = Field(64, ge=16, le=128)
    encoder_widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    branch3_widths: Optional[Tuple[int, int, int, int]] = None
    feature_dim: int = Field(128, ge=1)
    decoder_hidden: int = Field(128, ge=1)
    decoder_blocks: int = Field(5, ge=1)
    gate_hidden: int = Field(64, ge=1)
    branches: Tuple[int, ...] = (0, 1, 2, 3)
    fusion: FusionMode = FusionMode.GATE
    tap_stages: Tuple[int, int] = (2, 3)
    dog: GaussianScaleSpec = Field(default_factory=GaussianScaleSpec)
    dog_pair_index: int = Field(0, ge=0)
    cbn_momentum: float = Field(0.1, gt=0, le=1)
    cbn_eps: float = Field(1e-5, gt=0)
    precision: Precision = Precision.FLOAT32

    @field_validator("branches")
    @classmethod
    def main_branch_present(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if 0 not in v:
            raise ValueError("the main branch 0 is always active")
        if any(b not in (0, 1, 2, 3) for b in v) or len(set(v)) != len(v):
            raise ValueError("branches must be distinct ids among 0..3")
        return tuple(sorted(v))

    @field_validator("tap_stages")
    @classmethod
    def taps_are_stages(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if any(s not in (1, 2, 3, 4) for s in v):
            raise ValueError("tap stages must be among 1..4")
        return v

    @model_validator(mode="after")
    def fusion_matches_branches(self) -> "ModelConfig":
        if self.fusion == FusionMode.FIXED and len(self.branches) != 1:
            raise ValueError("fixed fusion needs exactly one active branch")
        if self.dog_pair_index >= len(self.dog.sigmas) - 1:
            raise ValueError("dog_pair_index must address two adjacent sigmas")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16 (four stride-2 stages)")
        return self

    def resolved_branch3_widths(self) -> Tuple[int, int, int, int]:
        if self.branch3_widths is not None:
            return self.branch3_widths
        return tuple(max(1, w // 2) for w in self.encoder_widths)


class TrainConfig(StrictModel):
    batch_size: int = Field(16, ge=2, description="CBN needs at least two samples")
    points_per_step: int = Field(512, ge=1)
    epochs: int = Field(10, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    learning_rate: float = Field(0.004, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    main_weight: float = Field(1.0, ge=0)
    side_weight: float = Field(1.0, ge=0)
    main_term: MainTerm = MainTerm.MIXED
    checkpoint_every: int = Field(500, ge=1)
    validation_points: int = Field(2048, ge=1)
    prefetch: int = Field(2, ge=1)
    model: ModelConfig = Field(default_factory=ModelConfig)


class EvalConfig(StrictModel):
    resolution: int = Field(64, ge=8, le=256)
    threshold: float = Field(0.5, gt=0, lt=1)
    iou_points: int = Field(100_000, ge=1)
    surface_points: int = Field(100_000, ge=1)
    gt_resolution: int = Field(128, ge=8, le=256)
    chunk_size: int = Field(65536, ge=1)
    seed: int = 0


# Records

class ManifestEntry(StrictModel):
    shape_id: str
    kind: PrimitiveKind
    split: Split
    image: str
    points: str
    pose: Pose
    shape: ShapeSpec
    camera: CameraSpec


class SampleMetrics(StrictModel):
    shape_id: str
    kind: PrimitiveKind
    iou: float = Field(..., ge=0, le=1)
    normal_consistency: Optional[float] = Field(None, ge=0, le=1)
    chamfer_l1: Optional[float] = Field(None, ge=0)
    normal_consistency_pred_to_gt: Optional[float] = None
    normal_consistency_gt_to_pred: Optional[float] = None
    chamfer_pred_to_gt: Optional[float] = None
    chamfer_gt_to_pred: Optional[float] = None
    empty_mesh: bool = False


class AggregateMetrics(StrictModel):
    group: str
    count: int
    meshed_count: int
    iou: float
    normal_consistency: Optional[float] = None
    chamfer_l1: Optional[float] = None


class MetricsReport(StrictModel):
    checkpoint: str
    split: Split
    samples: List[SampleMetrics]
    per_kind: List[AggregateMetrics]
    overall: AggregateMetrics
    config: EvalConfig


class VariantSummary(StrictModel):
    """Held-out metrics of one ablation variant, averaged over its seeds"""
    variant: AblationVariant
    seeds: List[int]
    iou: float
    normal_consistency: Optional[float] = None
    chamfer_l1: Optional[float] = None


class AblationSummary(StrictModel):
    variants: List[VariantSummary]
    slack: float = Field(..., ge=0)
    violations: List[str] = Field(default_factory=list)

    @property
    def ordering_holds(self) -> bool:
        return not self.violations


class RunConfig(StrictModel):
    subcommand: str
    config_path: Optional[str] = None
    seed: Optional[int] = None
    out: str
    overrides: List[str] = Field(default_factory=list)
    threads: int = Field(1, ge=1)
    force: bool = False
