"""Training losses (Charbonnier, edge, perceptual) and evaluation metrics (PSNR, SSIM, MAE)."""
import math
from dataclasses import dataclass, fields

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, InvalidInputError
from .laplace_prior import laplace_filter, to_grayscale

PSNR_CAP_DB = 100.0


@dataclass
class LossWeights:
    lambda_cb: float = 0.25
    lambda1: float = 0.1
    lambda2: float = 0.05
    eps_edge: float = 1e-5
    eps_char: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise InvalidInputError(f"{f.name} must be positive")


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def charbonnier(pred, gt, eps=1e-3):
    _check_pair(pred, gt)
    return torch.sqrt((pred - gt) ** 2 + eps ** 2).mean()


def edge_loss(pred, gt, eps=1e-5):
    """Charbonnier distance between per-channel Laplacians (applied pixelwise)."""
    _check_pair(pred, gt)
    return charbonnier(laplace_filter(pred, per_channel=True), laplace_filter(gt, per_channel=True), eps)


class FeatureExtractor(nn.Module):
    """Interface for perceptual features: ``forward`` returns a list of feature maps."""

    def forward(self, x):
        raise NotImplementedError


class IdentityExtractor(FeatureExtractor):
    def forward(self, x):
        return [x]


class RandomConvExtractor(FeatureExtractor):
    """Frozen 3-stage conv stack with seeded random weights.

    Deterministic and needs no external weights. ``weights_path`` may point
    at a ``state_dict`` with matching keys to use trained filters instead.
    """

    def __init__(self, channels=(16, 32, 64), seed=0, weights_path=None):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c_in = 3
        for i, c in enumerate(channels):
            conv = nn.Conv2d(c_in, c, 3, padding=1)
            with torch.no_grad():
                bound = math.sqrt(6.0 / (c_in * 9))
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            layers = [nn.AvgPool2d(2)] if i > 0 else []
            stages.append(nn.Sequential(*layers, conv, nn.ReLU()))
            c_in = c
        self.stages = nn.ModuleList(stages)
        if weights_path is not None:
            try:
                self.load_state_dict(torch.load(weights_path, map_location="cpu"))
            except Exception as exc:
                raise ConfigurationError(f"cannot load extractor weights from {weights_path}: {exc}") from exc
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always frozen
        return super().train(False)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def perceptual_loss(pred, gt, extractor):
    """Mean over extractor stages of the feature MSE."""
    _check_pair(pred, gt)
    try:
        fp = extractor(pred)
        fg = extractor(gt)
    except Exception as exc:
        raise ConfigurationError(f"feature extractor failed: {exc}") from exc
    if len(fp) < 1 or len(fp) != len(fg):
        raise ConfigurationError("feature extractor must return at least one stage")
    return sum(F.mse_loss(a, b) for a, b in zip(fp, fg)) / len(fp)


def total_mqformer_loss(pred, gt, weights=None, extractor=None, components=False):
    """Charbonnier + lambda1 * perceptual + lambda2 * edge.

    With ``components=True`` also returns the three unweighted terms.
    """
    weights = weights or LossWeights()
    extractor = extractor if extractor is not None else RandomConvExtractor()
    terms = (
        charbonnier(pred, gt, weights.eps_char),
        perceptual_loss(pred, gt, extractor),
        edge_loss(pred, gt, weights.eps_edge),
    )
    total = combine_losses(*terms, weights=weights)
    return (total, terms) if components else total


def combine_losses(char, per, edge, weights=None):
    weights = weights or LossWeights()
    return char + weights.lambda1 * per + weights.lambda2 * edge


# ---------------------------------------------------------------------------
# metrics: inputs are (C, H, W) or (B, C, H, W) in [0, 1]; batches are averaged per image

def _batched(x):
    x = torch.as_tensor(x)
    return x.unsqueeze(0) if x.dim() == 3 else x


def psnr(pred, gt, max_val=1.0):
    pred, gt = _batched(pred).double(), _batched(gt).double()
    _check_pair(pred, gt)
    mse = ((pred - gt) ** 2).flatten(1).mean(1)
    vals = [PSNR_CAP_DB if m == 0 else min(PSNR_CAP_DB, 10 * math.log10(max_val ** 2 / m))
            for m in mse.tolist()]
    return sum(vals) / len(vals)


def gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_map(pred, gt, data_range=1.0, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM over the valid (unpadded) window positions of the luma channel."""
    pred, gt = _batched(pred).double(), _batched(gt).double()
    _check_pair(pred, gt)
    x, y = to_grayscale(pred), to_grayscale(gt)
    if min(x.shape[-2:]) < window:
        raise InvalidInputError(f"images must be at least {window}x{window} for SSIM")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x * mu_x
    syy = F.conv2d(y * y, w) - mu_y * mu_y
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, gt, data_range=1.0):
    return float(ssim_map(pred, gt, data_range).flatten(1).mean(1).mean())


def mae(pred, gt, scale=255.0):
    pred, gt = _batched(pred).double(), _batched(gt).double()
    _check_pair(pred, gt)
    return float((pred - gt).abs().mean() * scale)


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    mae: float
    n_images: int

    CSV_HEADER = "psnr_db,ssim,mae,n_images"

    def to_kv(self):
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self)) + "\n"

    def to_csv_row(self):
        return f"{self.psnr_db:.6f},{self.ssim:.6f},{self.mae:.6f},{self.n_images}"

    @classmethod
    def from_kv(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["psnr_db"]), float(kv["ssim"]), float(kv["mae"]), int(kv["n_images"]))


def metric_report(preds, gts):
    """Average PSNR / SSIM / MAE over paired lists of (C, H, W) images."""
    if len(preds) != len(gts) or not preds:
        raise InvalidInputError("need equally many, and at least one, predictions and targets")
    n = len(preds)
    return MetricReport(
        psnr_db=sum(psnr(p, g) for p, g in zip(preds, gts)) / n,
        ssim=sum(ssim(p, g) for p, g in zip(preds, gts)) / n,
        mae=sum(mae(p, g) for p, g in zip(preds, gts)) / n,
        n_images=n,
    )
