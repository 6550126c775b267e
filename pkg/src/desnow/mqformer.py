"""Mask-guided recovery network: parallel transformer / convolutional encoders and a hybrid decoder."""
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidInputError
from .laplace_vqvae import count_parameters  # noqa: F401  (re-exported)

N_SCALES = 3


@dataclass
class MQFormerConfig:
    stage_channels: tuple = (32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2)
    n_queries: int = 8  # None: one query per reduced token (no query reduction)
    mlp_ratio: int = 4
    ca_kernel: int = 7
    reduction_kernel: int = 4
    use_mask: bool = True
    encoder: str = "parallel"  # or "hybrid": a single stream of MQTM+CACM blocks

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        if len(self.stage_channels) != N_SCALES or len(self.blocks_per_stage) != N_SCALES:
            raise InvalidInputError(f"need {N_SCALES} stage widths and block counts")
        if self.n_queries is not None and self.n_queries < 1:
            raise InvalidInputError("n_queries must be >= 1")
        if self.encoder not in ("parallel", "hybrid"):
            raise InvalidInputError(f"unknown encoder layout {self.encoder!r}")

    @property
    def size_multiple(self):
        # three halvings, then the attention reduction at the lowest scale
        return 2 ** N_SCALES * self.reduction_kernel

    def to_dict(self):
        return asdict(self)


def _check_same_shape(a, b):
    if b is not None and a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_divisible(x, k):
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise InvalidInputError(f"spatial size {h}x{w} is not divisible by {k}")


class PDConv(nn.Sequential):
    """Depthwise 3x3 followed by a pointwise 1x1."""

    def __init__(self, channels, k_size=3):
        super().__init__(
            nn.Conv2d(channels, channels, k_size, padding=k_size // 2, groups=channels),
            nn.Conv2d(channels, channels, 1),
        )


class MLP(nn.Sequential):
    def __init__(self, channels, ratio=4):
        super().__init__(
            nn.Conv2d(channels, channels * ratio, 1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels * ratio, channels, 1),
        )


class ChannelAttention(nn.Module):
    """Global average pool -> 1-D conv across channels (no bias) -> sigmoid -> channel rescale."""

    def __init__(self, k_size=7):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, k_size, padding=k_size // 2, bias=False)

    def gate(self, f):
        y = f.mean(dim=(2, 3))  # (B, C)
        y = self.conv(y.unsqueeze(1)).squeeze(1)
        return torch.sigmoid(y)[:, :, None, None]

    def forward(self, f):
        return f * self.gate(f)


class CACM(nn.Module):
    """Mask-injected conv block with channel attention and a BatchNorm + MLP tail."""

    def __init__(self, channels, ca_kernel=7, mlp_ratio=4):
        super().__init__()
        self.conv = PDConv(channels)
        self.act = nn.LeakyReLU(0.1)
        self.ca = ChannelAttention(ca_kernel)
        self.norm = nn.BatchNorm2d(channels)
        self.mlp = MLP(channels, mlp_ratio)

    def forward(self, f, f_mask=None):
        _check_same_shape(f, f_mask)
        x = f if f_mask is None else f + f_mask
        x = x + self.ca(self.act(self.conv(x)))
        return x + self.mlp(self.norm(x))


class DMQA(nn.Module):
    """Mask query attention computed at 1/``reduction`` scale.

    Keys and values come from the reduced input; queries from the reduced
    input plus reduced mask, average-pooled (over raster-ordered tokens) down
    to ``n_queries`` vectors. Each query gathers a summary ``O = A V``; the
    summaries are then spread back over positions with the transposed
    attention weights, normalised per position so every position receives a
    convex combination of query summaries. A transposed conv expands back.
    """

    def __init__(self, channels, n_queries=8, reduction=4):
        super().__init__()
        self.n_queries = n_queries
        self.reduction = reduction
        # depthwise: channel mixing happens in the 1x1 q / kv projections
        self.rd = nn.Conv2d(channels, channels, reduction, stride=reduction, groups=channels)
        self.kv = nn.Conv2d(channels, 2 * channels, 1)
        self.q = nn.Conv2d(channels, channels, 1)
        self.ep = nn.ConvTranspose2d(channels, channels, reduction, stride=reduction, groups=channels)

    def attention(self, f_input, f_cmask=None):
        """Return ``(A (B, n_q, n), V (B, n, C), reduced spatial size)``."""
        log_a, v, hw = self._log_attention(f_input, f_cmask)
        return log_a.exp(), v, hw

    def _log_attention(self, f_input, f_cmask=None):
        _check_same_shape(f_input, f_cmask)
        _check_divisible(f_input, self.reduction)
        r = self.rd(f_input)
        b, c, h, w = r.shape
        k, v = self.kv(r).flatten(2).chunk(2, dim=1)  # (B, C, n) each
        q_in = r if f_cmask is None else r + self.rd(f_cmask)
        q = self.q(q_in).flatten(2)
        if self.n_queries is not None:
            q = F.adaptive_avg_pool1d(q, self.n_queries)
        logits = q.transpose(1, 2) @ k / math.sqrt(c)
        return logits.log_softmax(dim=-1), v.transpose(1, 2), (h, w)

    def forward(self, f_input, f_cmask=None):
        log_a, v, (h, w) = self._log_attention(f_input, f_cmask)
        summaries = log_a.exp() @ v  # (B, n_q, C)
        # A^T normalised over queries, done in log space so positions that every
        # query ignores (underflowed weights) still get a proper convex combination
        spread = log_a.softmax(dim=1).transpose(1, 2)
        field = (spread @ summaries).transpose(1, 2)  # (B, C, n)
        return self.ep(field.reshape(field.shape[0], -1, h, w))


def spatial_softmax(m):
    """Softmax over all spatial positions, separately per channel."""
    return m.flatten(2).softmax(dim=-1).view_as(m)


class MSCB(nn.Module):
    """Conv branch gated by the spatial softmax of the mask: ``f + Conv(f) * softmax(mask)``."""

    def __init__(self, channels):
        super().__init__()
        self.conv = PDConv(channels)

    def forward(self, f_input, f_cmask=None):
        _check_same_shape(f_input, f_cmask)
        m = torch.zeros_like(f_input) if f_cmask is None else f_cmask
        return f_input + self.conv(f_input) * spatial_softmax(m)


class MQTM(nn.Module):
    def __init__(self, channels, n_queries=8, mlp_ratio=4, reduction=4):
        super().__init__()
        self.mscb = MSCB(channels)
        self.dmqa = DMQA(channels, n_queries, reduction)
        self.norm = nn.BatchNorm2d(channels)
        self.mlp = MLP(channels, mlp_ratio)

    def fuse(self, f_input, f_cmask=None):
        return self.mscb(f_input, f_cmask) + self.dmqa(f_input, f_cmask)

    def forward(self, f_input, f_cmask=None):
        x = self.fuse(f_input, f_cmask)
        return x + self.mlp(self.norm(x))


class ConvNeXtBlock(nn.Module):
    """Depthwise 7x7 -> BatchNorm -> pointwise MLP, residual."""

    def __init__(self, channels, mlp_ratio=4):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = nn.BatchNorm2d(channels)
        self.mlp = MLP(channels, mlp_ratio)

    def forward(self, x):
        return x + self.mlp(self.norm(self.dw(x)))


class PDE(nn.Module):
    """Full-resolution detail refinement: two 3x3 convs with a residual."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class MaskPyramid(nn.Module):
    """Projects the coarse mask to f_A, f_B, f_C at 1/2, 1/4, 1/8 resolution."""

    def __init__(self, stage_channels):
        super().__init__()
        chans = (1,) + tuple(stage_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(N_SCALES))
        self.act = nn.LeakyReLU(0.1)

    def forward(self, cmask):
        _check_divisible(cmask, 2 ** N_SCALES)
        levels = []
        x = cmask
        for i, conv in enumerate(self.convs):
            x = conv(x if i == 0 else self.act(x))
            levels.append(x)
        return tuple(levels)


class HybridBlock(nn.Module):
    """MQTM followed by CACM, both mask-guided."""

    def __init__(self, channels, cfg):
        super().__init__()
        self.mqtm = MQTM(channels, cfg.n_queries, cfg.mlp_ratio, cfg.reduction_kernel)
        self.cacm = CACM(channels, cfg.ca_kernel, cfg.mlp_ratio)

    def forward(self, x, m=None):
        return self.cacm(self.mqtm(x, m), m)


class _Stage(nn.ModuleList):
    def forward(self, x, m=None):
        for block in self:
            x = block(x, m)
        return x


class _Up(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def _down(c_in, c_out):
    return nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)


class MQFormer(nn.Module):
    """Predicts the snow residual from the snowy image and its coarse mask."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or MQFormerConfig()
        chans = cfg.stage_channels
        c0 = chans[0]
        prev = (c0,) + chans[:-1]
        self.stem = nn.Conv2d(3, c0, 3, padding=1)
        self.pyramid = MaskPyramid(chans) if cfg.use_mask else None

        if cfg.encoder == "parallel":
            self.t_down = nn.ModuleList(_down(a, b) for a, b in zip(prev, chans))
            self.c_down = nn.ModuleList(_down(a, b) for a, b in zip(prev, chans))
            self.t_enc = nn.ModuleList(
                _Stage(MQTM(c, cfg.n_queries, cfg.mlp_ratio, cfg.reduction_kernel) for _ in range(n))
                for c, n in zip(chans, cfg.blocks_per_stage))
            self.c_enc = nn.ModuleList(
                _Stage(CACM(c, cfg.ca_kernel, cfg.mlp_ratio) for _ in range(n))
                for c, n in zip(chans, cfg.blocks_per_stage))
            streams = 2
        else:
            self.h_down = nn.ModuleList(_down(a, b) for a, b in zip(prev, chans))
            self.h_enc = nn.ModuleList(
                _Stage(HybridBlock(c, cfg) for _ in range(n))
                for c, n in zip(chans, cfg.blocks_per_stage))
            streams = 1

        self.fuse = nn.ModuleList(nn.Conv2d(streams * c, c, 1) for c in chans)
        self.dec_cnx = nn.ModuleList(ConvNeXtBlock(c, cfg.mlp_ratio) for c in chans)
        self.dec = nn.ModuleList(HybridBlock(c, cfg) for c in chans)
        self.up = nn.ModuleList(_Up(b, a) for a, b in zip(prev, chans))
        self.pde = PDE(c0)
        self.head = nn.Conv2d(c0, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _encode(self, x, masks):
        if self.cfg.encoder == "parallel":
            t, c = x, x
            t_feats, c_feats = [], []
            for s in range(N_SCALES):
                t = self.t_enc[s](self.t_down[s](t), masks[s])
                c = self.c_enc[s](self.c_down[s](c), masks[s])
                t_feats.append(t)
                c_feats.append(c)
            return [torch.cat(pair, dim=1) for pair in zip(t_feats, c_feats)]
        feats = []
        for s in range(N_SCALES):
            x = self.h_enc[s](self.h_down[s](x), masks[s])
            feats.append(x)
        return feats

    def forward_features(self, img, cmask=None):
        """Run the network and return a dict of intermediate features plus the residual."""
        if img.dim() != 4 or img.shape[1] != 3:
            raise InvalidInputError(f"expected (B, 3, H, W), got {tuple(img.shape)}")
        _check_divisible(img, self.cfg.size_multiple)
        if self.cfg.use_mask:
            if cmask is None:
                raise InvalidInputError("this configuration needs a coarse mask")
            if cmask.shape[-2:] != img.shape[-2:] or cmask.shape[1] != 1:
                raise InvalidInputError("coarse mask must be (B, 1, H, W) matching the image")
            masks = self.pyramid(cmask)
        else:
            masks = (None,) * N_SCALES

        stem = self.stem(img)
        enc = self._encode(stem, masks)
        fused = [None] * N_SCALES
        x = None
        for s in reversed(range(N_SCALES)):
            f = self.fuse[s](enc[s])
            fused[s] = f
            if x is not None:
                f = f + self.up[s + 1](x)
            x = self.dec[s](self.dec_cnx[s](f), masks[s])
        x = self.up[0](x) + stem
        residual = self.head(self.pde(x))
        return {"masks": masks, "encoder": enc, "fused": fused, "residual": residual}

    def forward(self, img, cmask=None):
        """Return ``(residual, restored)``; the restored image is clamped to [0, 1] in eval mode."""
        residual = self.forward_features(img, cmask)["residual"]
        clean = img - residual
        if not self.training:
            clean = clean.clamp(0.0, 1.0)
        return residual, clean
