"""Image-specific class saliency: input-gradient magnitude of the positive-class score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import InputError
from .model import ModelArtifact, to_tensor


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W, min-max normalized to [0, 1]
    raw: np.ndarray  # H x W x 3 input gradient, unnormalized
    image_id: Optional[str] = None
    model_fingerprint: Optional[str] = None


def input_gradient(model: torch.nn.Module, image: np.ndarray, dtype=torch.float32) -> np.ndarray:
    """d(logit)/d(input) for a single H x W x 3 image, returned as H x W x 3."""
    model.eval()
    x = to_tensor(image).to(dtype).requires_grad_(True)
    model.zero_grad(set_to_none=True)
    score = model(x).sum()
    (grad,) = torch.autograd.grad(score, x)
    return grad[0].permute(1, 2, 0).detach().to(torch.float64).numpy()


def reduce_channels(grad: np.ndarray, reduction: str = "max") -> np.ndarray:
    mag = np.abs(grad)
    if reduction == "max":
        return mag.max(axis=-1)
    if reduction == "sum":
        return mag.sum(axis=-1)
    raise InputError(f"unknown channel reduction {reduction!r}")


def normalize_map(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def saliency_map(
    artifact: ModelArtifact,
    image: np.ndarray,
    *,
    fingerprint: str,
    image_id: Optional[str] = None,
    reduction: str = "max",
) -> SaliencyMap:
    """Saliency of the positive class for one preprocessed image.

    The gradient is taken of the pre-sigmoid score, following the usual
    class-saliency formulation; the sigmoid would only rescale the map by a
    per-image constant that normalization removes anyway.
    """
    if fingerprint != artifact.preprocess_fingerprint:
        raise InputError(
            f"preprocessing fingerprint {fingerprint} does not match the model's "
            f"{artifact.preprocess_fingerprint}"
        )
    image = np.asarray(image)
    size = artifact.model_config.input_size
    if image.shape != (size, size, 3):
        raise InputError(f"expected a {size}x{size}x3 image, got {image.shape}")
    grad = input_gradient(artifact.model, image)
    values = normalize_map(reduce_channels(grad, reduction))
    return SaliencyMap(values=values, raw=grad, image_id=image_id, model_fingerprint=artifact.fingerprint)


def colorize(values: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """Map [0, 1] scalars to uint8 RGB with a matplotlib colormap."""
    from matplotlib import colormaps

    rgba = colormaps[cmap](np.clip(values, 0.0, 1.0))
    return np.rint(rgba[..., :3] * 255).astype(np.uint8)


def overlay(image: np.ndarray, values: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Side-by-side composite: the photograph, then the photograph with the heat map blended in."""
    image = np.asarray(image)
    values = np.asarray(values)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 image, got {image.shape}")
    if values.shape != image.shape[:2]:
        raise InputError(f"map shape {values.shape} does not match image {image.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must be in [0, 1], got {alpha}")
    photo = image.astype(np.float64)
    heat = colorize(values, cmap).astype(np.float64)
    right = np.rint((1.0 - alpha) * photo + alpha * heat)
    right = np.clip(right, 0, 255).astype(np.uint8)
    return np.concatenate([image.astype(np.uint8), right], axis=1)


def lesion_contrast(values: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Mean saliency inside and outside a lesion mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        raise InputError("mask must contain both lesion and background pixels")
    return float(values[mask].mean()), float(values[~mask].mean())
