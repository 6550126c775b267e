"""The full two-network restorer: coarse mask from the VQ-VAE, residual from the MQFormer."""
import torch
from torch import nn

from .laplace_vqvae import LaplaceVQVAE, count_parameters
from .mqformer import MQFormer


class SnowRemovalModel(nn.Module):
    """``clean = snow - F(snow, G(snow))`` with G frozen (it is trained separately)."""

    def __init__(self, vqvae: LaplaceVQVAE, mqformer: MQFormer):
        super().__init__()
        self.vqvae = vqvae
        self.mqformer = mqformer
        self.vqvae.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        self.vqvae.eval()
        return self

    def coarse_mask(self, img):
        with torch.no_grad():
            return self.vqvae(img)[0]

    def forward(self, img):
        """Return ``(residual, restored, coarse mask or None)``."""
        cmask = self.coarse_mask(img) if self.mqformer.cfg.use_mask else None
        residual, clean = self.mqformer(img, cmask)
        return residual, clean, cmask

    def parameter_counts(self):
        a = sum(p.numel() for p in self.vqvae.parameters())
        b = count_parameters(self.mqformer)
        return {"vqvae": a, "mqformer": b, "total": a + b}
