"""Coarse-mask generator: a small VQ-VAE over the Laplace-filtered gray image."""
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidInputError
from .laplace_prior import laplace_filter, to_grayscale

N_DOWNSAMPLES = 3


@dataclass
class VQVAEConfig:
    base_channels: int = 24
    codebook_sizes: tuple = (512, 512)
    embedding_dims: tuple = (None, None)  # None -> base_channels
    commitment_beta: float = 0.25

    def __post_init__(self):
        self.codebook_sizes = tuple(self.codebook_sizes)
        self.embedding_dims = tuple(self.embedding_dims)
        if self.base_channels < 4:
            raise InvalidInputError("base_channels must be >= 4")
        if len(self.codebook_sizes) != 2 or len(self.embedding_dims) != 2:
            raise InvalidInputError("exactly two quantized levels are supported")
        if min(self.codebook_sizes) < 2:
            raise InvalidInputError("codebook size must be >= 2")
        for d in self.embedding_dims:
            if d is not None and d != self.base_channels:
                raise InvalidInputError("embedding dim must equal base_channels")

    def to_dict(self):
        return asdict(self)


class QuantizeResult(NamedTuple):
    z_q: torch.Tensor
    indices: torch.Tensor
    codebook_loss: torch.Tensor


class _StraightThrough(torch.autograd.Function):
    """Returns the codebook vectors; passes the incoming gradient to ``z_e`` unchanged."""

    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class Codebook(nn.Module):
    def __init__(self, n_codes, dim):
        super().__init__()
        if n_codes < 2:
            raise InvalidInputError("codebook needs at least 2 entries")
        self.embeddings = nn.Parameter(torch.empty(n_codes, dim).uniform_(-1.0 / n_codes, 1.0 / n_codes))

    @property
    def n_codes(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


def nearest_indices(flat, embeddings):
    """Index of the nearest row of ``embeddings`` for each row of ``flat`` (L2, lowest index on ties)."""
    dist = (flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ embeddings.t()
            + embeddings.pow(2).sum(1)[None, :])
    # argmin returns the first minimum.
    return dist.argmin(dim=1)


def quantize(z_e, codebook, beta=0.25):
    """Replace each spatial vector of ``z_e`` (B, d_e, h, w) by its nearest codebook row.

    The loss is the standard codebook + commitment pair
    ``||sg(z_e) - e||^2 + beta * ||z_e - sg(e)||^2`` (means over elements).
    """
    if z_e.dim() != 4 or z_e.shape[1] != codebook.dim:
        raise InvalidInputError(
            f"z_e must be (B, {codebook.dim}, h, w), got {tuple(z_e.shape)}")
    b, d, h, w = z_e.shape
    flat = z_e.permute(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_indices(flat.detach(), codebook.embeddings.detach())
    e = codebook.embeddings[idx]
    loss = F.mse_loss(e, flat.detach()) + beta * F.mse_loss(flat, e.detach())
    z_q = _StraightThrough.apply(flat, e)
    z_q = z_q.view(b, h, w, d).permute(0, 3, 1, 2)
    return QuantizeResult(z_q, idx.view(b, h, w), loss)


class SpatialGate(nn.Module):
    """Per-pixel gate in [0, 1] from the channel mean and max maps."""

    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class SACM(nn.Module):
    """Spatial attention convolution module: conv -> spatial gate -> conv, with a residual."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)
        self.gate = SpatialGate()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, f):
        y = self.act(self.conv1(f))
        return f + self.conv2(y * self.gate(y))


class _Up(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class LaplaceVQVAE(nn.Module):
    """Gray -> Laplace -> 3x downsampling encoder -> codebooks at 1/4 and 1/8 -> decoder.

    The 1/2-scale encoder features skip quantization and are fused straight
    into the decoder.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or VQVAEConfig()
        c = cfg.base_channels
        self.stem = nn.Conv2d(1, c, 3, padding=1)
        self.enc = nn.ModuleList([SACM(c) for _ in range(N_DOWNSAMPLES + 1)])
        self.down = nn.ModuleList([nn.Conv2d(c, c, 3, stride=2, padding=1) for _ in range(N_DOWNSAMPLES)])
        self.codebooks = nn.ModuleList([Codebook(k, c) for k in cfg.codebook_sizes])
        self.dec = nn.ModuleList([SACM(c) for _ in range(N_DOWNSAMPLES + 1)])
        self.up = nn.ModuleList([_Up(c) for _ in range(N_DOWNSAMPLES)])
        self.fuse = nn.ModuleList([nn.Conv2d(2 * c, c, 1) for _ in range(2)])
        self.head = nn.Conv2d(c, 1, 3, padding=1)

    def encode(self, lap):
        feats = []
        x = self.enc[0](self.stem(lap))
        for down, block in zip(self.down, self.enc[1:]):
            x = block(down(x))
            feats.append(x)
        return feats  # 1/2, 1/4, 1/8

    def forward(self, img):
        """Return ``(coarse mask (B, 1, H, W), [codebook loss at 1/4, at 1/8])``."""
        if img.dim() != 4:
            raise InvalidInputError("expected a (B, C, H, W) batch")
        h, w = img.shape[-2:]
        step = 2 ** N_DOWNSAMPLES
        if h % step or w % step:
            raise InvalidInputError(f"spatial size {h}x{w} is not divisible by {step}")
        lap = laplace_filter(to_grayscale(img))
        e1, e2, e3 = self.encode(lap)
        q2 = quantize(e2, self.codebooks[0], self.cfg.commitment_beta)
        q3 = quantize(e3, self.codebooks[1], self.cfg.commitment_beta)

        x = self.dec[0](q3.z_q)
        x = self.dec[1](self.fuse[0](torch.cat([self.up[0](x), q2.z_q], dim=1)))
        x = self.dec[2](self.fuse[1](torch.cat([self.up[1](x), e1], dim=1)))
        x = self.dec[3](self.up[2](x))
        return self.head(x), [q2.codebook_loss, q3.codebook_loss]


def vqvae_loss(pred, target, codebook_losses, lam=0.25):
    """MSE to the coarse-mask target plus ``lam`` times the summed codebook losses."""
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target) + lam * sum(codebook_losses)


def count_parameters(params):
    """Number of trainable scalars in a module or an iterable of tensors."""
    if isinstance(params, nn.Module):
        params = params.parameters()
    return sum(p.numel() for p in params if p.requires_grad)
