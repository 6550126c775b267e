"""Two-stage training, checkpoints, evaluation, ablations and single-image inference."""
import dataclasses
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import coerce_fields, to_kv
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .laplace_prior import coarse_mask_target
from .laplace_vqvae import LaplaceVQVAE, VQVAEConfig, count_parameters, vqvae_loss
from .losses_metrics import (LossWeights, MetricReport, RandomConvExtractor, mae, psnr, ssim,
                             total_mqformer_loss)
from .mqformer import MQFormer, MQFormerConfig
from .pipeline import SnowRemovalModel
from .snow_synth import center_crop, load_image, random_crop_flip, save_image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 100
    steps: int = None  # overrides epochs * steps_per_epoch when set
    batch_size: int = 8
    crop: int = 256
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    optimizer: str = "adam"
    weight_decay: float = 0.0
    seed: int = 0
    device: str = "cpu"
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        if not self.lr_init > self.lr_min > 0:
            raise ConfigurationError("need lr_init > lr_min > 0")
        if self.epochs < 1 or (self.steps is not None and self.steps < 1):
            raise ConfigurationError("epochs and steps must be >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_stage(cls, stage, **overrides):
        if stage == 2:
            base = dict(stage=2, epochs=400, optimizer="adamw", weight_decay=1e-4)
        else:
            base = dict(stage=1, epochs=100, optimizer="adam", weight_decay=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_kv(cls, raw, stage=1):
        return cls.for_stage(stage, **coerce_fields(cls, raw))


def desk_preset():
    """Small configs that run the whole pipeline on one CPU core in minutes."""
    vq = VQVAEConfig(base_channels=6)
    mq = MQFormerConfig(stage_channels=(8, 16, 32))
    s1 = TrainConfig.for_stage(1, steps=400, batch_size=4, crop=64)
    s2 = TrainConfig.for_stage(2, steps=2000, batch_size=4, crop=64)
    return vq, mq, s1, s2


def cosine_lr(step, total_steps, lr_init=2e-4, lr_min=1e-6):
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps < 1:
        raise InvalidInputError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_init
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# checkpoints

def state_hash(state_dict):
    """SHA-256 over names and raw bytes of every tensor, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    kind: str  # "vqvae" or "mqformer"
    model_config: dict
    train_config: dict
    state: dict
    optimizer_state: dict = None
    epoch: int = 0
    step: int = 0
    losses: list = field(default_factory=list)
    rng_state: object = None
    extra: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(dataclasses.asdict(self), path)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"checkpoint {path} does not exist")
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
        return cls(**blob)

    def param_hash(self):
        return state_hash(self.state)

    def build(self):
        """Instantiate the model this checkpoint describes, weights loaded, in eval mode."""
        if self.kind == "vqvae":
            model = LaplaceVQVAE(VQVAEConfig(**self.model_config))
        elif self.kind == "mqformer":
            model = MQFormer(MQFormerConfig(**self.model_config))
        else:
            raise ConfigurationError(f"unknown checkpoint kind {self.kind!r}")
        model.load_state_dict(self.state)
        return model.eval()


def _as_checkpoint(ckpt, kind):
    if ckpt is None:
        raise ConfigurationError(f"a {kind} checkpoint is required")
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != kind:
        raise ConfigurationError(f"expected a {kind} checkpoint, got {ckpt.kind}")
    return ckpt


def load_model(vqvae_ckpt, mqformer_ckpt):
    vq = _as_checkpoint(vqvae_ckpt, "vqvae").build()
    mq = _as_checkpoint(mqformer_ckpt, "mqformer").build()
    return SnowRemovalModel(vq, mq).eval()


# ---------------------------------------------------------------------------
# data

class BatchSource:
    """Seed-deterministic batches: batch ``t`` depends only on (seed, t)."""

    def __init__(self, manifest, crop, batch_size, seed):
        if len(manifest) == 0:
            raise InvalidInputError("manifest has no entries")
        self.samples = [manifest.load_sample(i) for i in range(len(manifest))]
        self.crop = crop
        self.batch_size = min(batch_size, len(self.samples))
        self.seed = seed
        self.steps_per_epoch = max(1, len(self.samples) // self.batch_size)

    def batch(self, step):
        epoch, k = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))
        idx = order[k * self.batch_size:(k + 1) * self.batch_size]
        rng = np.random.default_rng([self.seed, epoch, k, 1])
        crops = [random_crop_flip(self.samples[i], self.crop, rng) for i in idx]
        snow = torch.from_numpy(np.stack([c.snow for c in crops]))
        clean = torch.from_numpy(np.stack([c.clean for c in crops]))
        return snow, clean, [int(i) for i in idx]


def _optimizer(params, cfg):
    cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=cfg.lr_init, weight_decay=cfg.weight_decay)


def _check_finite(loss, step, idx, seed):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss.item()} at step {step}; batch sample indices {idx}, "
            f"data seed {seed} (batch rng = default_rng([{seed}, epoch, k, 1]))")


def _run(model, opt, source, cfg, loss_fn, start_step, total, until, losses):
    step = start_step
    end = total if until is None else min(until, total)
    while step < end:
        lr = cosine_lr(step, total, cfg.lr_init, cfg.lr_min)
        for g in opt.param_groups:
            g["lr"] = lr
        snow, clean, idx = source.batch(step)
        loss = loss_fn(snow, clean)
        _check_finite(loss, step, idx, cfg.seed)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("stage %d step %d/%d loss %.6f lr %.3g", cfg.stage, step, total, losses[-1], lr)
        step += 1
    return step


def _total_steps(cfg, source):
    return cfg.steps if cfg.steps is not None else cfg.epochs * source.steps_per_epoch


def _epochs_done(step, total, cfg, source):
    if step >= total and cfg.steps is None:
        return cfg.epochs
    return step // source.steps_per_epoch


def train_stage1(manifest, cfg=None, vq_cfg=None, resume=None, until=None):
    """Fit the Laplace VQ-VAE to the coarse-mask target; returns a ``vqvae`` Checkpoint."""
    cfg = cfg or TrainConfig.for_stage(1)
    vq_cfg = vq_cfg or VQVAEConfig()
    if resume is not None:
        resume = _as_checkpoint(resume, "vqvae")
        vq_cfg = VQVAEConfig(**resume.model_config)
    source = BatchSource(manifest, cfg.crop, cfg.batch_size, cfg.seed)
    torch.manual_seed(cfg.seed)
    model = LaplaceVQVAE(vq_cfg).train()
    opt = _optimizer(model.parameters(), cfg)
    start, losses = 0, []
    if resume is not None:
        model.load_state_dict(resume.state)
        opt.load_state_dict(resume.optimizer_state)
        start, losses = resume.step, list(resume.losses)
    weights = LossWeights()

    def loss_fn(snow, clean):
        pred, cb = model(snow)
        return vqvae_loss(pred, coarse_mask_target(snow, clean), cb, weights.lambda_cb)

    total = _total_steps(cfg, source)
    step = _run(model, opt, source, cfg, loss_fn, start, total, until, losses)
    return Checkpoint("vqvae", dataclasses.asdict(vq_cfg), dataclasses.asdict(cfg),
                      _cpu_state(model), opt.state_dict(), _epochs_done(step, total, cfg, source),
                      step, losses, torch.get_rng_state())


def train_stage2(manifest, vqvae_ckpt, cfg=None, mq_cfg=None, resume=None, until=None,
                 weights=None, extractor=None):
    """Fit the MQFormer with the VQ-VAE frozen; returns a ``mqformer`` Checkpoint.

    The frozen network's parameter hash is checked after training.
    """
    cfg = cfg or TrainConfig.for_stage(2)
    mq_cfg = mq_cfg or MQFormerConfig()
    vq_ck = _as_checkpoint(vqvae_ckpt, "vqvae")
    if resume is not None:
        resume = _as_checkpoint(resume, "mqformer")
        mq_cfg = MQFormerConfig(**resume.model_config)
    source = BatchSource(manifest, cfg.crop, cfg.batch_size, cfg.seed)
    vqvae = vq_ck.build()
    frozen_hash = state_hash(vqvae.state_dict())
    torch.manual_seed(cfg.seed)
    model = SnowRemovalModel(vqvae, MQFormer(mq_cfg)).train()
    opt = _optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    start, losses = 0, []
    if resume is not None:
        model.mqformer.load_state_dict(resume.state)
        opt.load_state_dict(resume.optimizer_state)
        start, losses = resume.step, list(resume.losses)
    weights = weights or LossWeights()
    extractor = extractor if extractor is not None else RandomConvExtractor()

    def loss_fn(snow, clean):
        _, restored, _ = model(snow)
        return total_mqformer_loss(restored, clean, weights, extractor)

    total = _total_steps(cfg, source)
    step = _run(model, opt, source, cfg, loss_fn, start, total, until, losses)
    if state_hash(vqvae.state_dict()) != frozen_hash:
        raise RuntimeError("frozen VQ-VAE parameters changed during stage 2")
    return Checkpoint("mqformer", dataclasses.asdict(mq_cfg), dataclasses.asdict(cfg),
                      _cpu_state(model.mqformer), opt.state_dict(), _epochs_done(step, total, cfg, source),
                      step, losses, torch.get_rng_state(), {"vqvae_hash": frozen_hash})


def _cpu_state(model):
    return {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    metrics: MetricReport
    baseline: MetricReport  # snowy input vs clean
    runtime_s: float  # mean wall-clock seconds per image
    parameters: dict
    rows: list  # per image: (index, psnr, ssim, mae)
    crop: int = 0

    def to_kv(self):
        lines = [f"{k}={v}" for k, v in dataclasses.asdict(self.metrics).items()]
        lines += [f"baseline_{k}={v}" for k, v in dataclasses.asdict(self.baseline).items()]
        lines += [f"runtime_s={self.runtime_s:.6f}", f"crop={self.crop}"]
        lines += [f"params_{k}={v}" for k, v in self.parameters.items()]
        return "\n".join(lines) + "\n"

    def rows_csv(self):
        out = ["index,psnr_db,ssim,mae"]
        out += [f"{i},{p:.6f},{s:.6f},{m:.6f}" for i, p, s, m in self.rows]
        return "\n".join(out) + "\n"


def _eval_crop(sample, crop, multiple):
    h, w = sample.clean.shape[-2:]
    size = min(crop, h, w)
    size -= size % multiple
    if size < multiple:
        raise InvalidInputError(f"image {h}x{w} too small for evaluation")
    return center_crop(sample, size), size


def evaluate(model, manifest, crop=256):
    """Center-crop every entry, restore it, and average PSNR / SSIM / MAE.

    ``model`` maps a (1, 3, H, W) batch to a restored batch; a SnowRemovalModel
    is used through its ``restored`` output.
    """
    if len(manifest) == 0:
        raise InvalidInputError("manifest has no entries")
    multiple = model.mqformer.cfg.size_multiple if isinstance(model, SnowRemovalModel) else 1
    if isinstance(model, nn.Module):
        model.eval()
    rows, base_rows, elapsed = [], [], 0.0
    size = crop
    for i in range(len(manifest)):
        sample, size = _eval_crop(manifest.load_sample(i), crop, multiple)
        snow = torch.from_numpy(sample.snow)[None]
        clean = torch.from_numpy(sample.clean)[None]
        t0 = time.perf_counter()
        with torch.no_grad():
            out = model(snow)
        elapsed += time.perf_counter() - t0
        restored = (out[1] if isinstance(out, tuple) else out).clamp(0, 1)
        rows.append((i, psnr(restored, clean), ssim(restored, clean), mae(restored, clean)))
        base_rows.append((i, psnr(snow, clean), ssim(snow, clean), mae(snow, clean)))
    n = len(rows)

    def avg(rs):
        return MetricReport(sum(r[1] for r in rs) / n, sum(r[2] for r in rs) / n, sum(r[3] for r in rs) / n, n)

    params = model.parameter_counts() if isinstance(model, SnowRemovalModel) else {
        "total": count_parameters(model) if isinstance(model, nn.Module) else 0}
    return EvalReport(avg(rows), avg(base_rows), elapsed / n, params, rows, size)


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = {
    "modules": {
        "H-En w/o mask": {"encoder": "hybrid", "use_mask": False},
        "P-En w/o mask": {"encoder": "parallel", "use_mask": False},
        "P-En w/ mask": {"encoder": "parallel", "use_mask": True},
    },
    "queries": {
        "4Q": {"n_queries": 4},
        "16Q": {"n_queries": 16},
        "original Q": {"n_queries": None},
        "8Q": {"n_queries": 8},
    },
}

ABLATION_CSV_HEADER = "config,psnr_db,ssim,mae,final_loss"


def run_ablation(axis, manifest, eval_manifest, vqvae_ckpt, cfg, base_mq_cfg=None, configs=None):
    """Train one MQFormer per configuration under identical seeds and budgets.

    Returns ``(rows, csv_text)`` where each row is ``(name, psnr, ssim, mae, final_loss)``.
    Every configuration is validated before any training starts.
    """
    if configs is None:
        if axis not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATIONS)}")
        configs = ABLATIONS[axis]
    base = dataclasses.asdict(base_mq_cfg or MQFormerConfig())
    resolved = {}
    for name, overrides in configs.items():
        unknown = set(overrides) - set(base)
        if unknown:
            raise ConfigurationError(f"config {name!r}: unknown key(s) {sorted(unknown)}")
        resolved[name] = MQFormerConfig(**{**base, **overrides})

    vq_ck = _as_checkpoint(vqvae_ckpt, "vqvae")
    rows = []
    for name, mq_cfg in resolved.items():
        ck = train_stage2(manifest, vq_ck, cfg, mq_cfg)
        report = evaluate(SnowRemovalModel(vq_ck.build(), ck.build()), eval_manifest, cfg.crop)
        m = report.metrics
        rows.append((name, m.psnr_db, m.ssim, m.mae, ck.losses[-1]))
    lines = [ABLATION_CSV_HEADER] + [f"{n},{p:.6f},{s:.6f},{a:.6f},{l:.8f}" for n, p, s, a, l in rows]
    return rows, "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# inference

def restore_image(model, img):
    """Restore a (3, H, W) float image of any size (reflect-padded to the network's multiple)."""
    img = torch.as_tensor(img, dtype=torch.float32)
    if img.dim() != 3 or img.shape[0] != 3:
        raise InvalidInputError("expected a (3, H, W) image")
    m = model.mqformer.cfg.size_multiple
    h, w = img.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    x = img[None]
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    model.eval()
    with torch.no_grad():
        _, restored, cmask = model(x)
    restored = restored[0, :, :h, :w]
    cmask = None if cmask is None else cmask[0, :, :h, :w]
    return restored, cmask


def infer(model, image_in, image_out, mask_out=None):
    """Read ``image_in``, write the restored image (and optionally a coarse-mask visualisation)."""
    try:
        img = load_image(image_in)
    except Exception as exc:
        raise OSError(f"cannot read {image_in}: {exc}") from exc
    restored, cmask = restore_image(model, img)
    save_image(image_out, restored.numpy())
    if mask_out is not None and cmask is not None:
        vis = cmask.abs()
        vis = vis / vis.max().clamp_min(1e-8)
        save_image(mask_out, vis.numpy())
    return restored


def checkpoint_bytes_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_summary(*objs):
    buf = io.StringIO()
    for obj in objs:
        buf.write(f"[{type(obj).__name__}]\n")
        buf.write(to_kv(obj))
    return buf.getvalue()
