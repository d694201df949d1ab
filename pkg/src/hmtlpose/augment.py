"""Supervised augmentation levels and Barlow Twins view distortions.

Every function takes an explicit ``numpy.random.Generator`` and works on
uint8 H x W x 3 images.  An optional ``trace`` list collects the names of the
stages that actually fired, which is how application frequencies are audited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import InvalidInputError
from .pretext import TileGrid, sample_pretext


@dataclass(frozen=True)
class AugmentConfig:
    level: int = 1
    zoom_range: tuple[float, float] = (0.85, 1.0)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    # level-2 extras
    p_blur: float = 0.3
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    p_downscale: float = 0.3
    downscale_range: tuple[float, float] = (0.25, 1.0)
    p_cutout: float = 0.5
    cutout_range: tuple[float, float] = (0.1, 0.3)
    # optional extras used by the limited-subject and sweep presets
    p_hue: float = 0.0
    hue_shift: float = 0.05
    p_brightness: float = 0.0
    brightness_range: tuple[float, float] = (0.8, 1.2)
    p_noise: float = 0.0
    noise_sigma: tuple[float, float] = (0.0, 0.05)

    def __post_init__(self):
        if self.level not in (1, 2):
            raise InvalidInputError(f"augmentation level must be 1 or 2, got {self.level}")
        for name in ("p_blur", "p_downscale", "p_cutout", "p_hue", "p_brightness", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidInputError(f"{name} must be a probability, got {p}")


@dataclass(frozen=True)
class BTViewConfig:
    output_size: int = 224
    p_color_jitter: float = 0.8
    p_grayscale: float = 0.3
    p_blur: float = 0.2
    p_resize: float = 0.2
    jitter_strength: float = 0.4
    crop_scale: tuple[float, float] = (0.6, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    downscale_range: tuple[float, float] = (0.25, 1.0)
    cutout_range: tuple[float, float] = (0.1, 0.3)
    puzzling_variant: bool = False
    puzzle_grid: int = 3

    def __post_init__(self):
        for name in ("p_color_jitter", "p_grayscale", "p_blur", "p_resize"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidInputError(f"{name} must be a probability, got {p}")

    def stages(self) -> list[str]:
        out = ["rotate90", "crop", "color_jitter", "grayscale", "noise", "blur_or_resize"]
        if self.puzzling_variant:
            out.append(f"puzzle{self.puzzle_grid}x{self.puzzle_grid}")
        out.append("cutout")
        return out


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _resize(image: np.ndarray, size: tuple[int, int], interpolation=cv2.INTER_LINEAR) -> np.ndarray:
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    return cv2.resize(image, (w, h), interpolation=interpolation)


def central_zoom(image: np.ndarray, factor: float) -> np.ndarray:
    """Crop the central ``factor`` fraction of each side and scale back up."""
    h, w = image.shape[:2]
    ch, cw = max(1, round(h * factor)), max(1, round(w * factor))
    r0, c0 = (h - ch) // 2, (w - cw) // 2
    return _resize(image[r0:r0 + ch, c0:c0 + cw], (h, w))


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image
    mean = image.reshape(-1, image.shape[-1]).mean(axis=0)
    return _to_uint8(mean + factor * (image.astype(np.float32) - mean))


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return _to_uint8(image.astype(np.float32) * factor)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    gray = to_grayscale(image).astype(np.float32)
    return _to_uint8(gray + factor * (image.astype(np.float32) - gray))


def shift_hue(image: np.ndarray, shift: float) -> np.ndarray:
    """Shift hue by ``shift`` of a full turn."""
    hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = ((hsv[..., 0].astype(np.int32) + int(round(shift * 180))) % 180).astype(np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
    return np.repeat(gray[..., None], 3, axis=-1)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return image
    return _to_uint8(image.astype(np.float32) + rng.normal(0.0, sigma * 255.0, image.shape))


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return cv2.GaussianBlur(image, (0, 0), sigmaX=sigma)


def downscale(image: np.ndarray, factor: float) -> np.ndarray:
    h, w = image.shape[:2]
    small = _resize(image, (max(1, round(h * factor)), max(1, round(w * factor))), cv2.INTER_AREA)
    return _resize(small, (h, w))


def cutout(image: np.ndarray, side_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Mask a random square with the image's per-channel mean."""
    h, w = image.shape[:2]
    side = int(round(side_frac * min(h, w)))
    if side == 0:
        return image
    r0 = int(rng.integers(0, h - side + 1))
    c0 = int(rng.integers(0, w - side + 1))
    out = image.copy()
    out[r0:r0 + side, c0:c0 + side] = np.rint(image.reshape(-1, image.shape[-1]).mean(axis=0))
    return out


def augment(
    image: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    trace: list | None = None,
) -> np.ndarray:
    """Supervised-training augmentation; output has the input's shape."""
    log = trace if trace is not None else []
    out = central_zoom(image, _uniform(rng, config.zoom_range))
    log.append("zoom")
    out = adjust_contrast(out, _uniform(rng, config.contrast_range))
    log.append("contrast")
    if config.p_brightness and rng.random() < config.p_brightness:
        out = adjust_brightness(out, _uniform(rng, config.brightness_range))
        log.append("brightness")
    if config.p_hue and rng.random() < config.p_hue:
        out = shift_hue(out, rng.uniform(-config.hue_shift, config.hue_shift))
        log.append("hue")
    if config.p_noise and rng.random() < config.p_noise:
        out = gaussian_noise(out, _uniform(rng, config.noise_sigma), rng)
        log.append("noise")
    if config.level == 2:
        if rng.random() < config.p_blur:
            out = gaussian_blur(out, _uniform(rng, config.blur_sigma))
            log.append("blur")
        if rng.random() < config.p_downscale:
            out = downscale(out, _uniform(rng, config.downscale_range))
            log.append("downscale")
        if rng.random() < config.p_cutout:
            out = cutout(out, _uniform(rng, config.cutout_range), rng)
            log.append("cutout")
    return out


def color_jitter(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter in random order."""
    ops = [
        lambda x: adjust_brightness(x, rng.uniform(1 - strength, 1 + strength)),
        lambda x: adjust_contrast(x, rng.uniform(1 - strength, 1 + strength)),
        lambda x: adjust_saturation(x, rng.uniform(1 - strength, 1 + strength)),
        lambda x: shift_hue(x, rng.uniform(-strength / 4, strength / 4)),
    ]
    for i in rng.permutation(len(ops)):
        image = ops[i](image)
    return image


def random_crop(image: np.ndarray, scale, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    s = _uniform(rng, scale)
    ch, cw = max(1, round(h * s)), max(1, round(w * s))
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    return image[r0:r0 + ch, c0:c0 + cw]


def bt_view(
    image: np.ndarray,
    config: BTViewConfig,
    rng: np.random.Generator,
    trace: list | None = None,
) -> np.ndarray:
    log = trace if trace is not None else []
    size = (config.output_size, config.output_size)
    out = np.ascontiguousarray(np.rot90(image, int(rng.integers(0, 4))))
    log.append("rotate90")
    out = _resize(random_crop(out, config.crop_scale, rng), size)
    log.append("crop")
    if rng.random() < config.p_color_jitter:
        out = color_jitter(out, config.jitter_strength, rng)
        log.append("color_jitter")
    if rng.random() < config.p_grayscale:
        out = to_grayscale(out)
        log.append("grayscale")
    out = gaussian_noise(out, _uniform(rng, config.noise_sigma), rng)
    log.append("noise")
    pick_blur = rng.random() < 0.5
    if rng.random() < (config.p_blur if pick_blur else config.p_resize):
        if pick_blur:
            out = gaussian_blur(out, _uniform(rng, config.blur_sigma))
            log.append("blur")
        else:
            out = downscale(out, _uniform(rng, config.downscale_range))
            log.append("resize")
    if config.puzzling_variant:
        out = sample_pretext(rng, "puzzle", TileGrid(config.puzzle_grid), out).image
        log.append("puzzle")
    out = cutout(out, _uniform(rng, config.cutout_range), rng)
    log.append("cutout")
    return out


def bt_view_pair(
    image: np.ndarray,
    config: BTViewConfig,
    rng: np.random.Generator,
    traces: tuple[list, list] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    ta, tb = traces if traces is not None else (None, None)
    return bt_view(image, config, rng, ta), bt_view(image, config, rng, tb)
