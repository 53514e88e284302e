"""Train-time image augmentations.

Two stages, applied in order, each with probability 0.5:

1. JPEG re-compression at a quality drawn uniformly from [30, 100],
2. Gaussian blur with kernel size 3 or 5 (sigma derived from the kernel).

Eval exports never augment. The random draws come from one seeded generator in
a fixed order (jpeg coin, quality, blur coin, kernel), so a seed pins the whole
augmentation stream.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image

JPEG_PROB = 0.5
JPEG_QUALITY_RANGE = (30, 100)
BLUR_PROB = 0.5
BLUR_KERNELS = (3, 5)


@dataclass(frozen=True)
class AugmentSpec:
    """The exact parameter set, recorded verbatim in export manifests."""

    jpeg_prob: float = JPEG_PROB
    jpeg_quality_range: tuple[int, int] = JPEG_QUALITY_RANGE
    blur_prob: float = BLUR_PROB
    blur_kernels: tuple[int, ...] = BLUR_KERNELS

    def to_dict(self) -> dict:
        return {
            "jpeg_prob": self.jpeg_prob,
            "jpeg_quality_range": list(self.jpeg_quality_range),
            "blur_prob": self.blur_prob,
            "blur_kernels": list(self.blur_kernels),
        }


def draw_params(rng: np.random.Generator) -> tuple[int | None, int | None]:
    """(jpeg_quality | None, blur_kernel | None) for one image."""
    quality = None
    if rng.random() < JPEG_PROB:
        lo, hi = JPEG_QUALITY_RANGE
        quality = int(rng.integers(lo, hi + 1))
    kernel = None
    if rng.random() < BLUR_PROB:
        kernel = int(BLUR_KERNELS[rng.integers(0, len(BLUR_KERNELS))])
    return quality, kernel


def apply_jpeg(image: Image.Image, quality: int) -> Image.Image:
    buf = io.BytesIO()
    image.convert("RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    out = Image.open(buf)
    out.load()
    return out.convert("RGB")


def apply_blur(image: Image.Image, kernel: int) -> Image.Image:
    arr = np.asarray(image.convert("RGB"))
    blurred = cv2.GaussianBlur(arr, (kernel, kernel), 0)
    return Image.fromarray(blurred)


def augment_image(image: Image.Image, rng: np.random.Generator) -> Image.Image:
    quality, kernel = draw_params(rng)
    if quality is not None:
        image = apply_jpeg(image, quality)
    if kernel is not None:
        image = apply_blur(image, kernel)
    return image
