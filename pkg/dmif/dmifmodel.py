"""Four-branch occupancy network.

Branch 0 decodes from the main image embedding z. Branches 1 and 2 decode from
pooled, projected activations of intermediate encoder stages. Branch 3 runs the
RGB image plus its DoG map through a separate, narrower encoder. A gate turns
per-branch summary statistics and z into convex weights alpha, and the mixed
occupancy is sum_i alpha_i * p_i.
"""

import logging
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Set, Tuple, Union

import numpy as np

from . import numerics as nx
from .dogfilter import dog_input
from .errors import DimensionError
from .models import FusionMode, ModelConfig
from .numerics import (
    MAIN, SHARED, CBatchNorm, Conv2d, CResnetBlock, Linear, Module, ModuleList,
    ParameterSet, PointwiseLinear, ResidualBlock2d, Tensor, side_tag,
)

logger = logging.getLogger(__name__)

POINT_BOUND = 0.6
MAIN_BRANCH = 0
TAP_BRANCHES = (1, 2)
DOG_BRANCH = 3


def _module_rng(seed: int, name: str) -> np.random.Generator:
    """Initialization stream keyed by module name, so a submodule's weights do not depend on its siblings"""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclass
class EncoderFeatures:
    stages: Tuple[Tensor, ...]  # s1..s4, [B,C_i,H_i,W_i]
    z: Tensor                   # [B,F]


@dataclass
class BranchOutputs:
    branch_ids: Tuple[int, ...]
    logits: Tensor                  # [B,n,K]
    probs: Tensor                   # [B,n,K]
    z: Tensor                       # [B,F]
    alpha: Optional[Tensor] = None  # [B,n]
    mixed: Optional[Tensor] = None  # [B,K]

    def branch(self, branch_id: int) -> Tensor:
        """Probabilities [B,K] of one branch"""
        return self.probs[:, self.branch_ids.index(branch_id), :]


class ImageEncoder(Module):
    """Stride-2 stem, then four residual stages (the last three downsample), then pool + linear"""

    def __init__(self, in_channels: int, widths: Sequence[int], feature_dim: int, seed: int, name: str):
        super().__init__()
        self.stem = Conv2d(in_channels, widths[0], 3, _module_rng(seed, f"{name}.stem"), stride=2, padding=1)
        blocks = []
        previous = widths[0]
        for i, width in enumerate(widths):
            blocks.append(ResidualBlock2d(previous, width, 1 if i == 0 else 2, _module_rng(seed, f"{name}.stages.{i}")))
            previous = width
        self.stages = ModuleList(blocks)
        self.fc = Linear(widths[-1], feature_dim, _module_rng(seed, f"{name}.fc"))

    def forward(self, x: Tensor) -> EncoderFeatures:
        net = nx.relu(self.stem(x))
        stages = []
        for block in self.stages:
            net = block(net)
            stages.append(net)
        return EncoderFeatures(stages=tuple(stages), z=self.fc(nx.global_avg_pool(net)))


class OccupancyDecoder(Module):
    """Per-point network: lift xyz, residual CBN blocks, final CBN, one logit per point"""

    def __init__(self, condition_dim: int, hidden: int, blocks: int, seed: int, name: str,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.fc_p = PointwiseLinear(3, hidden, _module_rng(seed, f"{name}.fc_p"))
        self.blocks = ModuleList([
            CResnetBlock(condition_dim, hidden, _module_rng(seed, f"{name}.blocks.{i}"), momentum, eps)
            for i in range(blocks)
        ])
        self.bn = CBatchNorm(condition_dim, hidden, _module_rng(seed, f"{name}.bn"), momentum, eps)
        self.fc_out = PointwiseLinear(hidden, 1, _module_rng(seed, f"{name}.fc_out"))

    def forward(self, points: Tensor, condition: Tensor) -> Tensor:
        batch, k, _ = points.shape
        net = self.fc_p(nx.transpose(points, (0, 2, 1)))
        for block in self.blocks:
            net = block(net, condition)
        out = self.fc_out(nx.relu(self.bn(net, condition)))
        return nx.reshape(out, (batch, k))


class MixtureGate(Module):
    """(mean, min, max of each branch's probabilities over the points, z) -> softmax weights"""

    def __init__(self, n_branches: int, feature_dim: int, hidden: int, seed: int):
        super().__init__()
        self.fc0 = Linear(3 * n_branches + feature_dim, hidden, _module_rng(seed, "gate.fc0"))
        self.fc1 = Linear(hidden, n_branches, _module_rng(seed, "gate.fc1"))

    def forward(self, probs: Tensor, z: Tensor) -> Tensor:
        stats = nx.concat([probs.mean(axis=2), probs.min(axis=2), probs.max(axis=2), z], axis=1)
        return nx.softmax(self.fc1(nx.relu(self.fc0(stats))), axis=1)


class DmifNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.branch_ids: Tuple[int, ...] = tuple(config.branches)
        widths = config.encoder_widths
        feature_dim = config.feature_dim

        self.encoder = ImageEncoder(3, widths, feature_dim, seed, "encoder")
        for branch in TAP_BRANCHES:
            if branch in self.branch_ids:
                stage = self.tap_stage(branch)
                setattr(self, f"tap_{branch}", Linear(widths[stage - 1], feature_dim, _module_rng(seed, f"tap_{branch}")))
        if DOG_BRANCH in self.branch_ids:
            self.branch3_encoder = ImageEncoder(4, config.resolved_branch3_widths(), feature_dim, seed, "branch3_encoder")
        for branch in self.branch_ids:
            setattr(self, f"decoder_{branch}", OccupancyDecoder(
                feature_dim, config.decoder_hidden, config.decoder_blocks, seed, f"decoder_{branch}",
                config.cbn_momentum, config.cbn_eps,
            ))
        if config.fusion == FusionMode.GATE:
            self.gate = MixtureGate(len(self.branch_ids), feature_dim, config.gate_hidden, seed)

    def tap_stage(self, branch: int) -> int:
        return self.config.tap_stages[TAP_BRANCHES.index(branch)]

    def decoder(self, branch: int) -> OccupancyDecoder:
        return getattr(self, f"decoder_{branch}")

    # Inputs

    def _images(self, img, channels: int) -> Tensor:
        arr = img.data if isinstance(img, Tensor) else np.asarray(img)
        if arr.ndim == 3:
            arr = arr[None]
        size = self.config.image_size
        if arr.ndim != 4 or arr.shape[1:] != (channels, size, size):
            raise DimensionError(f"expected [B,{channels},{size},{size}] images, got {arr.shape}")
        return Tensor(np.asarray(arr, dtype=nx.default_dtype()))

    def _points(self, points, batch: int) -> Tensor:
        arr = points.data if isinstance(points, Tensor) else np.asarray(points)
        if arr.ndim == 2:
            arr = np.broadcast_to(arr, (batch,) + arr.shape)
        if arr.ndim != 3 or arr.shape[0] != batch or arr.shape[2] != 3:
            raise DimensionError(f"expected [B,K,3] points for a batch of {batch}, got {arr.shape}")
        if arr.shape[1] == 0:
            raise DimensionError("decoder needs at least one query point")
        if np.any(np.abs(arr) > POINT_BOUND):
            raise ValueError(f"query points must lie inside [-{POINT_BOUND}, {POINT_BOUND}]^3")
        return Tensor(np.array(arr, dtype=nx.default_dtype()))

    def dog_images(self, img: np.ndarray) -> np.ndarray:
        """Branch-III input for a batch of RGB images"""
        arr = np.asarray(img.data if isinstance(img, Tensor) else img)
        if arr.ndim == 3:
            arr = arr[None]
        return np.stack([dog_input(im, self.config.dog, self.config.dog_pair_index) for im in arr])

    # Forward pieces

    def encode(self, img) -> EncoderFeatures:
        return self.encoder(self._images(img, 3))

    def conditions(self, img, dog_img=None) -> Tuple[Tensor, Dict[int, Tensor]]:
        """z and the condition vector [B,F] of every active branch"""
        features = self.encode(img)
        conditions = {MAIN_BRANCH: features.z}
        for branch in TAP_BRANCHES:
            if branch in self.branch_ids:
                stage = features.stages[self.tap_stage(branch) - 1]
                conditions[branch] = getattr(self, f"tap_{branch}")(nx.global_avg_pool(stage))
        if DOG_BRANCH in self.branch_ids:
            if dog_img is None:
                dog_img = self.dog_images(img)
            conditions[DOG_BRANCH] = self.branch3_encoder(self._images(dog_img, 4)).z
        return features.z, conditions

    def decode_branch(self, branch: int, condition: Tensor, points) -> Tuple[Tensor, Tensor]:
        """(logits, probs), each [B,K]"""
        logits = self.decoder(branch)(self._points(points, condition.shape[0]), condition)
        return logits, nx.sigmoid(logits)

    def decode_all(self, z: Tensor, conditions: Dict[int, Tensor], points) -> BranchOutputs:
        logits = [self.decode_branch(b, conditions[b], points)[0] for b in self.branch_ids]
        stacked = nx.stack(logits, axis=1)
        return BranchOutputs(branch_ids=self.branch_ids, logits=stacked, probs=nx.sigmoid(stacked), z=z)

    def branch_forward(self, img, dog_img, points) -> BranchOutputs:
        z, conditions = self.conditions(img, dog_img)
        return self.decode_all(z, conditions, points)

    def mix(self, outputs: BranchOutputs, alpha: Optional[Union[np.ndarray, Sequence[float]]] = None) -> BranchOutputs:
        """Attach alpha and the mixed probability; an explicit alpha overrides the fusion rule"""
        batch, n_branches, _ = outputs.probs.shape
        if alpha is not None:
            weights = np.asarray(alpha, dtype=outputs.probs.dtype)
            weights = Tensor(np.array(np.broadcast_to(weights, (batch, n_branches))))
        elif self.config.fusion == FusionMode.GATE:
            weights = self.gate(outputs.probs, outputs.z)
        else:
            # mean fusion; fixed fusion has a single branch, so this is alpha = (1,)
            weights = Tensor(np.full((batch, n_branches), 1.0 / n_branches, dtype=outputs.probs.dtype))
        mixed = nx.tensor_sum(nx.reshape(weights, (batch, n_branches, 1)) * outputs.probs, axis=1)
        outputs.alpha = weights
        outputs.mixed = mixed
        return outputs

    def forward(self, img, dog_img, points, alpha=None) -> BranchOutputs:
        return self.mix(self.branch_forward(img, dog_img, points), alpha)

    # Inference

    def predict_occupancy(self, image, points: np.ndarray, chunk_size: Optional[int] = 65536) -> np.ndarray:
        """Mixed occupancy [M] for one image; branch probabilities are decoded in chunks, then mixed once"""
        points = np.asarray(points)
        if points.ndim != 2 or points.shape[1] != 3:
            raise DimensionError(f"expected [M,3] query points, got {points.shape}")
        chunk_size = chunk_size or len(points)
        was_training = self.training
        self.eval()
        try:
            with nx.no_grad():
                z, conditions = self.conditions(image)
                chunks = [self.decode_all(z, conditions, points[start:start + chunk_size]).logits
                          for start in range(0, len(points), chunk_size)]
                logits = nx.concat(chunks, axis=2)
                outputs = self.mix(BranchOutputs(self.branch_ids, logits, nx.sigmoid(logits), z))
        finally:
            self.train(was_training)
        return outputs.mixed.data[0]

    # Parameters and state

    def _users(self, name: str) -> Set[int]:
        """Branches whose prediction depends on the named parameter"""
        head, _, rest = name.partition(".")
        if head == "encoder":
            part, _, tail = rest.partition(".")
            if part == "stem":
                return {MAIN_BRANCH} | {b for b in TAP_BRANCHES if b in self.branch_ids}
            if part == "stages":
                stage = int(tail.partition(".")[0]) + 1
                return {MAIN_BRANCH} | {b for b in TAP_BRANCHES if b in self.branch_ids and self.tap_stage(b) >= stage}
            return {MAIN_BRANCH}
        if head == "branch3_encoder":
            return {DOG_BRANCH}
        if head.startswith("tap_") or head.startswith("decoder_"):
            return {int(head.rpartition("_")[2])}
        if head == "gate":
            return {MAIN_BRANCH}
        raise KeyError(f"No ownership rule for parameter '{name}'")

    def parameter_set(self) -> ParameterSet:
        named = list(self.named_parameters())
        tags = {}
        for name, _ in named:
            users = self._users(name) & set(self.branch_ids)
            if len(users) >= 2:
                tags[name] = SHARED
            elif users == {MAIN_BRANCH}:
                tags[name] = MAIN
            else:
                tags[name] = side_tag(next(iter(users)))
        return ParameterSet(named, tags)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        state.update((name, value.copy()) for name, value in self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            raise KeyError(f"State mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise DimensionError(f"'{name}' has shape {params[name].shape}, state has {value.shape}")
                params[name].data = np.array(value, dtype=params[name].dtype)
            elif name in buffers:
                self.set_buffer(name, value)
