"""On-disk formats: checkpoints, point files, manifests and images.

Checkpoint (little-endian)::

    b"DMIF" | version:u16 | header_len:u32 | header (UTF-8 JSON) | count:u32 |
    count x ( name_len:u16 | name | dtype:u8 | rank:u8 | dims:u32 x rank | raw values )

Point file (little-endian)::

    b"DMPT" | K:u32 | K x 3 float32 | K x uint8 labels
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import imageio.v3 as iio
import numpy as np

from .errors import FormatError
from .models import CameraSpec, ManifestEntry, Split

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"DMIF"
CHECKPOINT_VERSION = 1
POINTS_MAGIC = b"DMPT"
MANIFEST_NAME = "manifest.jsonl"

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}


def ensure_writable(path: PathLike, force: bool = False) -> Path:
    """Refuse to overwrite an existing file unless forced"""
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} already exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# Checkpoints

def write_checkpoint(path: PathLike, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)), header_bytes,
              struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
        dtype = np.dtype(dtype.str.replace("=", "<"))
        if dtype not in _DTYPE_TAGS:
            raise FormatError(f"Unsupported dtype {arr.dtype} for tensor '{name}'")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"{self.source}: truncated file")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: PathLike) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(reader.take(header_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag} for '{name}'")
        dims = reader.unpack(f"<{rank}I")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(dims).copy()
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return header, tensors


# Point files

def write_points(path: PathLike, points: np.ndarray, labels: np.ndarray) -> None:
    points = np.asarray(points, dtype="<f4")
    labels = np.asarray(labels, dtype="u1")
    if points.ndim != 2 or points.shape[1] != 3 or labels.shape != (points.shape[0],):
        raise FormatError(f"points {points.shape} and labels {labels.shape} do not form a K x 3 / K pair")
    Path(path).write_bytes(POINTS_MAGIC + struct.pack("<I", len(points)) + points.tobytes() + labels.tobytes())


def read_points(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    if reader.take(4) != POINTS_MAGIC:
        raise FormatError(f"{path}: not a point file (bad magic)")
    (k,) = reader.unpack("<I")
    points = np.frombuffer(reader.take(12 * k), dtype="<f4").reshape(k, 3).copy()
    labels = np.frombuffer(reader.take(k), dtype="u1").copy()
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: trailing bytes after labels")
    return points, labels


# Images

def write_image(path: PathLike, img: np.ndarray) -> None:
    """Write a [C,H,W] image in [0,1] as an 8-bit PNG (C = 1 or 3)"""
    img = np.asarray(img)
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    pixels = pixels[0] if pixels.shape[0] == 1 else np.transpose(pixels, (1, 2, 0))
    iio.imwrite(Path(path), pixels, extension=".png")


def read_image(path: PathLike) -> np.ndarray:
    """Read an image as float64 [3,H,W] in [0,1]; grayscale is replicated, alpha dropped"""
    pixels = np.asarray(iio.imread(Path(path)))
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[..., None], 3, axis=2)
    pixels = pixels[..., :3].astype(np.float64) / 255.0
    return np.transpose(pixels, (2, 0, 1))


# Manifest

def write_manifest(path: PathLike, entries: Iterable[ManifestEntry]) -> None:
    lines = [entry.model_dump_json() for entry in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: PathLike) -> List[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(ManifestEntry.model_validate_json(line))
    return entries


# Dataset access

@dataclass
class Sample:
    image: np.ndarray   # [3,H,W] in [0,1]
    points: np.ndarray  # [K,3] float32
    labels: np.ndarray  # [K] uint8
    shape_id: str
    camera: CameraSpec


class ShapeDataset:
    """Read-only view of one split of a built dataset"""

    def __init__(self, root: PathLike, split: Optional[Split] = None):
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        if not manifest.exists():
            raise FileNotFoundError(f"No manifest at {manifest}")
        entries = read_manifest(manifest)
        self.entries = [e for e in entries if split is None or e.split == Split(split)]
        self._cache: Dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> Sample:
        sample = self._cache.get(index)
        if sample is None:
            entry = self.entries[index]
            points, labels = read_points(self.root / entry.points)
            sample = Sample(
                image=read_image(self.root / entry.image),
                points=points,
                labels=labels,
                shape_id=entry.shape_id,
                camera=entry.camera,
            )
            self._cache[index] = sample
        return sample

    @property
    def points_per_shape(self) -> int:
        return len(self[0].points) if len(self) else 0
