"""Difference-of-Gaussians preprocessing for branch III.

RGB -> luma -> two Gaussian blurs at adjacent scales -> DoG map -> concatenated
with the RGB image as a fourth channel.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionError
from .models import GaussianScaleSpec

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class DoGMap:
    values: np.ndarray  # [H, W], signed
    pair: Tuple[int, int]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def _check_image(img: np.ndarray, channels: int, name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != channels:
        raise DimensionError(f"{name} expects a [{channels},H,W] image, got shape {img.shape}")
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = _check_image(img, 3, "to_grayscale")
    luma = np.tensordot(LUMA_WEIGHTS, img, axes=(0, 0))
    return np.clip(luma, 0.0, 1.0)[None]


def gaussian_kernel1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Sampled Gaussian on [-ceil(truncate*sigma), ceil(truncate*sigma)], renormalized to sum 1"""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Separable blur of a [1,H,W] image with reflect borders"""
    img = _check_image(img, 1, "gaussian_blur")
    kernel = gaussian_kernel1d(sigma, truncate)
    # scipy's "reflect" repeats the edge pixel: (d c b a | a b c d | d c b a)
    blurred = correlate1d(img[0], kernel, axis=0, mode="reflect")
    blurred = correlate1d(blurred, kernel, axis=1, mode="reflect")
    return blurred[None]


def dog_map(img: np.ndarray, spec: GaussianScaleSpec, pair_index: int = 0) -> DoGMap:
    """F_{i+1} - F_i for the adjacent scale pair (i, i+1)"""
    img = _check_image(img, 1, "dog_map")
    if not 0 <= pair_index < len(spec.sigmas) - 1:
        raise IndexError(f"pair index {pair_index} out of range for {len(spec.sigmas)} scales")
    fine = gaussian_blur(img, spec.sigmas[pair_index], spec.truncate)
    coarse = gaussian_blur(img, spec.sigmas[pair_index + 1], spec.truncate)
    return DoGMap(values=(coarse - fine)[0], pair=(pair_index, pair_index + 1))


def rescale_unit(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0,1]; a constant map becomes 0.5 everywhere"""
    low, high = float(values.min()), float(values.max())
    if high == low:
        return np.full_like(values, 0.5, dtype=np.float64)
    return (values - low) / (high - low)


def concat_branch3_input(img: np.ndarray, dog: DoGMap) -> np.ndarray:
    img = _check_image(img, 3, "concat_branch3_input")
    if dog.values.shape != img.shape[1:]:
        raise DimensionError(f"DoG map {dog.values.shape} does not match image {img.shape[1:]}")
    return np.concatenate([img, rescale_unit(dog.values)[None]], axis=0)


def dog_input(img: np.ndarray, spec: Optional[GaussianScaleSpec] = None, pair_index: int = 0) -> np.ndarray:
    """Full branch-III preprocessing: [3,H,W] RGB -> [4,H,W] RGB + rescaled DoG"""
    spec = spec or GaussianScaleSpec()
    return concat_branch3_input(img, dog_map(to_grayscale(img), spec, pair_index))
