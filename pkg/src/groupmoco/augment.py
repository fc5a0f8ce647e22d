"""Two-view contrastive augmentation (MoCo v2 recipe) and the deterministic
evaluation transform.

All randomness comes from an explicit ``numpy.random.Generator``; the two
views are drawn from independent child streams so that a given generator
state always yields the same pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torchvision.transforms.v2 import functional as TF

from .errors import ConfigError, FormatError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    output_size: int = 224
    jitter_strength: float = 1.0
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    hflip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "hflip_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.jitter_strength < 0:
            raise ConfigError("jitter_strength must be >= 0")
        if self.output_size < 1:
            raise ConfigError("output_size must be positive")

    @property
    def blur_kernel(self) -> int:
        """10% of the output size, rounded to an odd integer (minimum 3)."""
        k = int(round(0.1 * self.output_size))
        if k % 2 == 0:
            k += 1
        return max(k, 3)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def to_tensor(image) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` raster (or anything with ``.image``) -> float ``(3, H, W)`` in [0, 1]."""
    if hasattr(image, "image"):
        image = image.image
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected an (H, W, 3) raster, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float().div_(255.0)


def _normalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype).view(3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(3, 1, 1)
    return (x - m) / s


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    return TF.resize(x, [size, size], antialias=True)


def eval_transform(patch, output_size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """Deterministic resize + channel normalisation."""
    return _normalize(_resize(to_tensor(patch), output_size), mean, std)


def _crop_box(rng: np.random.Generator, height: int, width: int, scale) -> tuple[int, int, int, int]:
    # same sampling scheme as torchvision's RandomResizedCrop
    area = height * width
    log_ratio = (math.log(3 / 4), math.log(4 / 3))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            i = int(rng.integers(0, height - h + 1))
            j = int(rng.integers(0, width - w + 1))
            return i, j, h, w
    return 0, 0, height, width


def _one_view(x: torch.Tensor, config: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    i, j, h, w = _crop_box(rng, x.shape[-2], x.shape[-1], config.crop_scale)
    x = _resize(x[..., i : i + h, j : j + w], config.output_size)

    s = config.jitter_strength
    if s > 0 and rng.random() < config.jitter_prob:
        b, c, sat, hue = 0.4 * s, 0.4 * s, 0.4 * s, min(0.1 * s, 0.5)
        factors = (
            rng.uniform(max(0.0, 1 - b), 1 + b),
            rng.uniform(max(0.0, 1 - c), 1 + c),
            rng.uniform(max(0.0, 1 - sat), 1 + sat),
            rng.uniform(-hue, hue),
        )
        for op in rng.permutation(4):
            if op == 0:
                x = TF.adjust_brightness(x, factors[0])
            elif op == 1:
                x = TF.adjust_contrast(x, factors[1])
            elif op == 2:
                x = TF.adjust_saturation(x, factors[2])
            else:
                x = TF.adjust_hue(x, factors[3])
    if rng.random() < config.grayscale_prob:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma))
        k = config.blur_kernel
        x = TF.gaussian_blur(x, [k, k], [sigma, sigma])
    if rng.random() < config.hflip_prob:
        x = TF.horizontal_flip(x)
    return _normalize(x, config.mean, config.std)


def two_view_augment(patch, config: AugmentConfig, draw: np.random.Generator | None = None):
    """Return ``(view_q, view_k)``, each a ``(3, S, S)`` float tensor.

    ``draw`` advances by exactly two integer draws per call, one seed per view.
    """
    if draw is None:
        draw = config.rng()
    x = to_tensor(patch)
    seed_q, seed_k = draw.integers(0, 2**63 - 1, size=2)
    view_q = _one_view(x, config, np.random.default_rng(seed_q))
    view_k = _one_view(x, config, np.random.default_rng(seed_k))
    return view_q, view_k
