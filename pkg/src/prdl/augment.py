"""
Augmentation Operators

Prompt-indexed image augmentations for toy RGB patches: pre-augmentation,
the six gated operators and prompted view composition for multi-crop
distillation.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import InvalidPromptError
from .models.image import ToyImage, View, ViewKind
from .models.prompt import NUM_OPERATORS, OPERATOR_NAMES, Prompt

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

RESIZED_CROP, HORIZONTAL_FLIP, COLOR_JITTER, GRAYSCALE, GAUSSIAN_BLUR, SOLARIZATION = range(
    NUM_OPERATORS
)


def luma(pixels: np.ndarray) -> np.ndarray:
    """Per-pixel luma, shape (h, w)."""
    return pixels @ LUMA_WEIGHTS


def grayscale(pixels: np.ndarray) -> np.ndarray:
    return np.repeat(luma(pixels)[:, :, None], 3, axis=2)


def solarize(pixels: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(pixels > threshold, 1.0 - pixels, pixels)


def _blend(image: np.ndarray, other: np.ndarray, ratio: float) -> np.ndarray:
    return ratio * image + (1.0 - ratio) * other


def rgb_to_hsv(pixels: np.ndarray) -> np.ndarray:
    red, green, blue = pixels[..., 0], pixels[..., 1], pixels[..., 2]
    maxc = pixels.max(axis=-1)
    minc = pixels.min(axis=-1)
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    saturation = np.where(maxc > 0, delta / safe_max, 0.0)

    rc = (maxc - red) / safe_delta
    gc = (maxc - green) / safe_delta
    bc = (maxc - blue) / safe_delta
    hue = np.where(
        maxc == red, bc - gc, np.where(maxc == green, 2.0 + rc - bc, 4.0 + gc - rc)
    )
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, saturation, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hue, saturation, value = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    sector = np.floor(hue * 6.0)
    fraction = hue * 6.0 - sector
    sector = sector.astype(int) % 6
    p = value * (1.0 - saturation)
    q = value * (1.0 - saturation * fraction)
    t = value * (1.0 - saturation * (1.0 - fraction))
    choices_r = [value, q, p, p, t, value]
    choices_g = [t, value, value, q, p, p]
    choices_b = [p, p, t, value, value, q]
    conditions = [sector == i for i in range(6)]
    return np.stack(
        [
            np.select(conditions, choices_r),
            np.select(conditions, choices_g),
            np.select(conditions, choices_b),
        ],
        axis=-1,
    )


def _resample(pixels: np.ndarray, size: Tuple[int, int], box=None) -> np.ndarray:
    """Bilinear resample of an (h, w, 3) array to ``size`` = (width, height)."""
    height, width = pixels.shape[:2]
    if box is None:
        box = (0, 0, width, height)
    if (width, height) == tuple(size) and tuple(box) == (0, 0, width, height):
        return pixels
    channels = []
    for channel in range(3):
        plane = Image.fromarray(np.ascontiguousarray(pixels[:, :, channel], np.float32))
        resized = plane.resize(size, resample=Image.Resampling.BILINEAR, box=box)
        channels.append(np.asarray(resized, dtype=np.float64))
    return np.stack(channels, axis=-1)


class ViewAugmenter:
    """Applies pre-augmentation and prompt-gated view composition."""

    def __init__(
        self,
        canonical_size: int = 16,
        local_size: int = 8,
        global_scale: Tuple[float, float] = (0.4, 1.0),
        local_scale: Tuple[float, float] = (0.05, 0.4),
        flip_prob: float = 0.5,
        jitter_prob: float = 0.8,
        jitter_strength: Tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1),
        grayscale_prob: float = 0.2,
        blur_sigma: Tuple[float, float] = (0.1, 2.0),
        solarize_threshold: float = 0.5,
        bit_prob: float = 0.5,
    ):
        """
        Initialize the augmenter.

        Args:
            canonical_size: Side length of every view fed to the encoder
            local_size: Side length local crops are produced at
            global_scale: Area fraction range of global crops
            local_scale: Area fraction range of local crops
            flip_prob: Horizontal flip probability during pre-augmentation
            jitter_prob: Colour jitter probability during pre-augmentation
            jitter_strength: (brightness, contrast, saturation, hue)
            grayscale_prob: Grayscale probability during pre-augmentation
            blur_sigma: Range of the Gaussian blur sigma
            solarize_threshold: Pixels above this are inverted
            bit_prob: Per-operator probability when sampling prompts
        """
        if not 0.0 < bit_prob <= 1.0:
            raise ValueError(f"bit_prob must be in (0, 1], got {bit_prob}")
        self.canonical_size = canonical_size
        self.local_size = local_size
        self.global_scale = tuple(global_scale)
        self.local_scale = tuple(local_scale)
        self.flip_prob = flip_prob
        self.jitter_prob = jitter_prob
        self.jitter_strength = tuple(jitter_strength)
        self.grayscale_prob = grayscale_prob
        self.blur_sigma = tuple(blur_sigma)
        self.solarize_threshold = solarize_threshold
        self.bit_prob = bit_prob

    @property
    def input_dim(self) -> int:
        return 3 * self.canonical_size * self.canonical_size

    def sample_prompt(self, rng: np.random.Generator) -> Prompt:
        """Each bit is 1 with ``bit_prob``; all-zero draws are rejected."""
        while True:
            bits = (rng.random(NUM_OPERATORS) < self.bit_prob).astype(int)
            if bits.any():
                return Prompt(tuple(bits))

    def pre_augment(self, image: ToyImage, rng: np.random.Generator) -> ToyImage:
        """Random flip, colour jitter and grayscale; size unchanged."""
        pixels = image.pixels
        if rng.random() < self.flip_prob:
            pixels = pixels[:, ::-1, :]
        if rng.random() < self.jitter_prob:
            pixels = self._color_jitter(pixels, rng)
        if rng.random() < self.grayscale_prob:
            pixels = grayscale(pixels)
        return ToyImage(pixels)

    def apply_operator(
        self,
        image: ToyImage,
        op_index: int,
        rng: np.random.Generator,
        kind: ViewKind = ViewKind.GLOBAL,
    ) -> ToyImage:
        """Apply operator ``op_index`` (canonical order) to ``image``."""
        if not 0 <= op_index < NUM_OPERATORS:
            raise InvalidPromptError(
                f"Operator index {op_index} out of range [0, {NUM_OPERATORS})"
            )
        pixels = image.pixels
        if op_index == RESIZED_CROP:
            pixels = self._resized_crop(pixels, rng, kind)
        elif op_index == HORIZONTAL_FLIP:
            pixels = pixels[:, ::-1, :]
        elif op_index == COLOR_JITTER:
            pixels = self._color_jitter(pixels, rng)
        elif op_index == GRAYSCALE:
            pixels = grayscale(pixels)
        elif op_index == GAUSSIAN_BLUR:
            pixels = self._gaussian_blur(pixels, rng)
        else:
            pixels = solarize(pixels, self.solarize_threshold)
        logger.debug(f"Applied {OPERATOR_NAMES[op_index]} ({kind.value})")
        return ToyImage(pixels)

    def compose_view(
        self,
        image: ToyImage,
        prompt: Prompt,
        kind: ViewKind,
        rng: np.random.Generator,
    ) -> View:
        """t(x | p): active operators in canonical order."""
        if prompt.bits[RESIZED_CROP]:
            current = self.apply_operator(image, RESIZED_CROP, rng, kind)
        else:
            current = ToyImage(self._resize_for_kind(image.pixels, kind))
        for op_index in prompt.active:
            if op_index != RESIZED_CROP:
                current = self.apply_operator(current, op_index, rng, kind)
        return View(current, kind, prompt)

    def canonical(self, image: ToyImage) -> ToyImage:
        """Deterministic resize to the canonical size."""
        return ToyImage(self._resize_for_kind(image.pixels, ViewKind.GLOBAL))

    def _resize_for_kind(self, pixels: np.ndarray, kind: ViewKind, box=None) -> np.ndarray:
        canonical = (self.canonical_size, self.canonical_size)
        if kind is ViewKind.LOCAL:
            small = _resample(pixels, (self.local_size, self.local_size), box)
            return _resample(small, canonical)
        return _resample(pixels, canonical, box)

    def _resized_crop(
        self, pixels: np.ndarray, rng: np.random.Generator, kind: ViewKind
    ) -> np.ndarray:
        height, width = pixels.shape[:2]
        scale = self.local_scale if kind is ViewKind.LOCAL else self.global_scale
        area = height * width
        log_ratio = (math.log(3.0 / 4.0), math.log(4.0 / 3.0))
        box: Optional[Tuple[int, int, int, int]] = None
        for _ in range(10):
            target_area = area * rng.uniform(scale[0], scale[1])
            aspect = math.exp(rng.uniform(log_ratio[0], log_ratio[1]))
            crop_w = int(round(math.sqrt(target_area * aspect)))
            crop_h = int(round(math.sqrt(target_area / aspect)))
            if 0 < crop_w <= width and 0 < crop_h <= height:
                top = int(rng.integers(0, height - crop_h + 1))
                left = int(rng.integers(0, width - crop_w + 1))
                box = (left, top, left + crop_w, top + crop_h)
                break
        if box is None:
            box = (0, 0, width, height)
        return self._resize_for_kind(pixels, kind, box)

    def _color_jitter(self, pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        brightness, contrast, saturation, hue = self.jitter_strength
        factors = (
            rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness),
            rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast),
            rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation),
            rng.uniform(-hue, hue),
        )
        for step in rng.permutation(4):
            factor = factors[step]
            if step == 0 and factor != 1.0:
                pixels = np.clip(pixels * factor, 0.0, 1.0)
            elif step == 1 and factor != 1.0:
                pivot = float(luma(pixels).mean())
                pixels = np.clip(_blend(pixels, np.full_like(pixels, pivot), factor), 0.0, 1.0)
            elif step == 2 and factor != 1.0:
                pixels = np.clip(_blend(pixels, grayscale(pixels), factor), 0.0, 1.0)
            elif step == 3 and factor != 0.0:
                hsv = rgb_to_hsv(pixels)
                hsv[..., 0] = (hsv[..., 0] + factor) % 1.0
                pixels = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
        return pixels

    def _gaussian_blur(self, pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        sigma = rng.uniform(self.blur_sigma[0], self.blur_sigma[1])
        taps = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
        taps /= taps.sum()
        kernel = np.outer(taps, taps)
        height, width = pixels.shape[:2]
        padded = np.pad(pixels, ((1, 1), (1, 1), (0, 0)), mode="edge")
        blurred = np.zeros_like(pixels)
        for dy in range(3):
            for dx in range(3):
                blurred += kernel[dy, dx] * padded[dy : dy + height, dx : dx + width]
        return blurred


_default_augmenter = ViewAugmenter()


def sample_prompt(rng: np.random.Generator) -> Prompt:
    return _default_augmenter.sample_prompt(rng)


def pre_augment(image: ToyImage, rng: np.random.Generator) -> ToyImage:
    return _default_augmenter.pre_augment(image, rng)


def apply_operator(
    image: ToyImage,
    op_index: int,
    rng: np.random.Generator,
    kind: ViewKind = ViewKind.GLOBAL,
) -> ToyImage:
    return _default_augmenter.apply_operator(image, op_index, rng, kind)


def compose_view(
    image: ToyImage, prompt: Prompt, kind: ViewKind, rng: np.random.Generator
) -> View:
    return _default_augmenter.compose_view(image, prompt, kind, rng)
