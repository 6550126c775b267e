"""Grayscale / Laplacian preprocessing and the entropy utilities behind the Laplace prior."""
import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# 4-neighbour stencil, centre -4.
LAPLACE_KERNEL = ((0.0, 1.0, 0.0),
                  (1.0, -4.0, 1.0),
                  (0.0, 1.0, 0.0))


def _as_batched(x):
    """Return ``(tensor of shape (B, C, H, W), was_unbatched)``."""
    x = torch.as_tensor(x)
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise InvalidInputError(f"expected (C, H, W) or (B, C, H, W), got shape {tuple(x.shape)}")


def _restore(x, unbatched):
    return x.squeeze(0) if unbatched else x


def to_grayscale(img):
    """BT.601 luma for 3-channel input; 1-channel input passes through unchanged."""
    x, unbatched = _as_batched(img)
    c = x.shape[1]
    if c == 1:
        return _restore(x, unbatched)
    if c != 3:
        raise InvalidInputError(f"grayscale conversion needs 1 or 3 channels, got {c}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return _restore((x * w).sum(dim=1, keepdim=True), unbatched)


def laplace_kernel(dtype=torch.float32, device=None):
    return torch.tensor(LAPLACE_KERNEL, dtype=dtype, device=device).view(1, 1, 3, 3)


def laplace_filter(gray, per_channel=False):
    """Discrete 4-neighbour Laplacian with edge-mirrored padding.

    The one-pixel border is extended by mirroring about the image edge
    (``d c b a | a b c d``), which for a 3x3 stencil is the same as
    repeating the border pixel. Constants therefore map to exactly zero,
    including at the border.

    With ``per_channel=True`` each channel is filtered independently;
    otherwise the input must be single-channel.
    """
    x, unbatched = _as_batched(gray)
    c = x.shape[1]
    if c != 1 and not per_channel:
        raise InvalidInputError(f"laplace_filter expects a single channel, got {c}")
    k = laplace_kernel(x.dtype, x.device).repeat(c, 1, 1, 1)
    y = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k, groups=c)
    return _restore(y, unbatched)


def coarse_mask_target(snow, clean):
    """Difference of Laplacians of the gray snowy and clean images."""
    snow = torch.as_tensor(snow)
    clean = torch.as_tensor(clean)
    if snow.shape != clean.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(snow.shape)} vs {tuple(clean.shape)}")
    return laplace_filter(to_grayscale(snow)) - laplace_filter(to_grayscale(clean))


def shannon_entropy(values, n_bins=256, value_range=None):
    """Histogram entropy in nats.

    Bins span ``value_range`` (default: the map's own min/max). Pass a shared
    range when two maps are to be compared bin for bin.
    """
    if n_bins < 2:
        raise InvalidInputError("n_bins must be >= 2")
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    lo, hi = (v.min(), v.max()) if value_range is None else value_range
    if hi <= lo:
        return 0.0
    counts, _ = np.histogram(v, bins=n_bins, range=(lo, hi))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def kl_onehot_uniform(n_codes):
    """KL divergence of a one-hot distribution from the uniform one over ``n_codes`` outcomes."""
    if n_codes < 1:
        raise InvalidInputError("n_codes must be >= 1")
    return math.log(n_codes)
