import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity
from torch.nn import functional as F

from conftest import autograd_grad, fd_grad, rel_err
from desnow.errors import ConfigurationError, InvalidInputError
from desnow.laplace_prior import laplace_filter, to_grayscale
from desnow.losses_metrics import (IdentityExtractor, LossWeights, MetricReport, RandomConvExtractor,
                                   charbonnier, combine_losses, edge_loss, mae, metric_report,
                                   perceptual_loss, psnr, ssim, total_mqformer_loss)


def _pair(rng, shape=(1, 3, 16, 16)):
    return torch.from_numpy(rng.random(shape)), torch.from_numpy(rng.random(shape))


# ---------------------------------------------------------------------------
# losses

def test_charbonnier_examples(rng):
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert charbonnier(x, x, 1e-3).item() == pytest.approx(1e-3, abs=1e-15)
    d = 0.3
    assert charbonnier(x + d, x, 1e-3).item() == pytest.approx(math.sqrt(d * d + 1e-6), abs=1e-12)
    a, b = _pair(rng)
    loop = sum(math.sqrt((p - g) ** 2 + 1e-6) for p, g in zip(a.flatten().tolist(), b.flatten().tolist()))
    assert abs(charbonnier(a, b, 1e-3).item() - loop / a.numel()) < 1e-9
    with pytest.raises(InvalidInputError):
        charbonnier(a, b[..., :8])


def test_edge_loss_examples(rng):
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert edge_loss(x, x).item() == pytest.approx(1e-5, abs=1e-15)
    assert edge_loss(x + 0.25, x).item() == pytest.approx(1e-5, abs=1e-12)
    a, b = _pair(rng)
    composed = charbonnier(laplace_filter(a, per_channel=True), laplace_filter(b, per_channel=True), 1e-5)
    assert abs(edge_loss(a, b).item() - composed.item()) < 1e-12


def test_perceptual_examples(rng):
    a, b = _pair(rng)
    ext = RandomConvExtractor().double()
    assert perceptual_loss(a, a, ext).item() == 0.0
    assert abs(perceptual_loss(a, b, IdentityExtractor()).item() - F.mse_loss(a, b).item()) < 1e-15
    # stage-by-stage recomputation
    fa, fb, total = a, b, 0.0
    for stage in ext.stages:
        fa, fb = stage(fa), stage(fb)
        total += ((fa - fb) ** 2).mean().item()
    assert abs(perceptual_loss(a, b, ext).item() - total / 3) < 1e-7


def test_extractor_is_deterministic_and_frozen():
    a, b = RandomConvExtractor(seed=3), RandomConvExtractor(seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q) and not p.requires_grad
    a.train()
    assert not a.training


def test_extractor_bad_weights_path(tmp_path):
    with pytest.raises(ConfigurationError):
        RandomConvExtractor(weights_path=tmp_path / "missing.pt")


def test_extractor_loads_weights(tmp_path):
    src = RandomConvExtractor(seed=5)
    torch.save(src.state_dict(), tmp_path / "w.pt")
    dst = RandomConvExtractor(seed=0, weights_path=tmp_path / "w.pt")
    assert all(torch.equal(p, q) for p, q in zip(src.parameters(), dst.parameters()))


def test_broken_extractor_is_configuration_error():
    class Broken(torch.nn.Module):
        def forward(self, x):
            raise RuntimeError("boom")

    x = torch.rand(1, 3, 8, 8)
    with pytest.raises(ConfigurationError):
        perceptual_loss(x, x, Broken())


def test_total_loss_composition(rng):
    w = LossWeights()
    assert abs(combine_losses(1.0, 0.5, 0.2, w) - 1.06) < 1e-12
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    ext = RandomConvExtractor().double()
    same = total_mqformer_loss(x, x, w, ext).item()
    assert abs(same - (w.eps_char + w.lambda2 * w.eps_edge)) < 1e-12
    a, b = _pair(rng)
    total, (c, p, e) = total_mqformer_loss(a, b, w, ext, components=True)
    ref = (charbonnier(a, b, w.eps_char) + w.lambda1 * perceptual_loss(a, b, ext)
           + w.lambda2 * edge_loss(a, b, w.eps_edge))
    assert abs(total.item() - ref.item()) < 1e-9
    assert (c.item(), p.item(), e.item()) == pytest.approx(
        (charbonnier(a, b).item(), perceptual_loss(a, b, ext).item(), edge_loss(a, b).item()), abs=1e-12)


def test_loss_weights_positive():
    with pytest.raises(InvalidInputError):
        LossWeights(lambda1=0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_loss_floors(seed):
    g = np.random.default_rng(seed)
    a, b = (torch.from_numpy(g.random((1, 3, 12, 12))) for _ in range(2))
    ext = RandomConvExtractor().double()
    assert charbonnier(a, b, 1e-3).item() >= 1e-3
    assert edge_loss(a, b).item() >= 1e-5
    assert perceptual_loss(a, b, ext).item() >= 0.0


def loss_gradient_errors():
    """Relative gradient error w.r.t. pred for each training loss (float64)."""
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=g)
    gt = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=g)
    ext = RandomConvExtractor().double()
    fns = {
        "charbonnier": lambda t: charbonnier(t, gt, 1e-3),
        "edge": lambda t: edge_loss(t, gt, 1e-5),
        "perceptual": lambda t: perceptual_loss(t, gt, ext),
        "total": lambda t: total_mqformer_loss(t, gt, LossWeights(), ext),
    }
    return {k: rel_err(autograd_grad(f, pred), fd_grad(f, pred)) for k, f in fns.items()}


def test_loss_gradients():
    for name, err in loss_gradient_errors().items():
        assert err < 1e-3, (name, err)


# ---------------------------------------------------------------------------
# metrics

def test_psnr_examples():
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    assert psnr(x, x) == 100.0
    y = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    val = psnr(y + 16 / 255, y)
    assert abs(val - 20 * math.log10(255 / 16)) < 1e-9
    assert abs(psnr(y + 8 / 255, y) - val - 20 * math.log10(2)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.4), st.floats(1.01, 2.0))
def test_psnr_decreasing(err, factor):
    y = torch.full((1, 8, 8), 0.3, dtype=torch.float64)
    assert psnr(y + err * factor, y) < psnr(y + err, y)


def test_psnr_averages_per_image():
    y = torch.zeros(2, 1, 4, 4, dtype=torch.float64)
    p = y.clone()
    p[0] += 0.1
    p[1] += 0.01
    assert psnr(p, y) == pytest.approx((20.0 + 40.0) / 2, abs=1e-9)


def _ssim_loop(x, y, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Direct window-by-window SSIM over valid positions of 2-D arrays."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a, b = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * a).sum(), (w * b).sum()
            vx = (w * a * a).sum() - mx * mx
            vy = (w * b * b).sum() - my * my
            cxy = (w * a * b).sum() - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_symmetry(rng):
    a, b = _pair(rng, (3, 24, 24))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_checkerboard_negative():
    board = (np.indices((16, 16)).sum(0) % 2).astype(np.float64)
    x = torch.from_numpy(np.repeat(board[None], 3, 0))
    val = ssim(x, 1 - x)
    assert val < 0
    assert abs(val - _ssim_loop(board, 1 - board)) < 1e-9


def test_ssim_matches_skimage(rng):
    for _ in range(3):
        a = rng.random((3, 32, 40))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ours = ssim(torch.from_numpy(a), torch.from_numpy(b))
        ga, gb = (to_grayscale(torch.from_numpy(v))[0].numpy() for v in (a, b))
        ref = structural_similarity(ga, gb, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert abs(ours - ref) < 1e-6
        assert abs(ours - _ssim_loop(ga, gb)) < 1e-9


def test_ssim_too_small():
    with pytest.raises(InvalidInputError):
        ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


def test_mae_examples(rng):
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    assert mae(x, x) == 0.0
    y = torch.full((3, 8, 8), 0.2, dtype=torch.float64)
    assert abs(mae(y + 0.1, y) - 25.5) < 1e-9
    a, b = _pair(rng)
    loop = sum(abs(p - g) for p, g in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel() * 255
    assert abs(mae(a, b) - loop) < 1e-9


def test_metric_report_serialisation(rng):
    a, b = _pair(rng, (3, 16, 16))
    rep = metric_report([a, b], [b, b])
    assert rep.n_images == 2
    assert MetricReport.from_kv(rep.to_kv()) == rep
    assert len(rep.to_csv_row().split(",")) == len(MetricReport.CSV_HEADER.split(","))
    with pytest.raises(InvalidInputError):
        metric_report([], [])
