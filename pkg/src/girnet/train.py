"""Training loop, inference and the ablation grid."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, reverse_accumulate
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    PatchSample,
    VideoClip,
    bicubic_resize,
    load_clip,
    random_patch,
    read_manifest,
    save_clip,
    stack_batch,
)
from .metrics import charbonnier_loss, evaluate_frames, psnr
from .model import ModelConfig, check_weights, girnet_forward, init_weights
from .optim import OptimState, adam_step, lr_schedule

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.girn"


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [rec[2] for rec in self.log]


def load_manifest_clips(manifest) -> list[tuple[str, VideoClip]]:
    paths = read_manifest(manifest)
    if not paths:
        raise DataError(f"manifest {manifest} lists no clips")
    return [(str(p), load_clip(p)) for p in paths]


def epoch_batches(n_clips: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Clip indices of each step in ``epoch``: a seeded shuffle cut into batches."""
    order = np.random.default_rng([seed, epoch]).permutation(n_clips)
    return [order[i : i + batch] for i in range(0, n_clips, batch)]


def sample_batch(clips, indices, scale: int, seed: int, epoch: int) -> list[PatchSample]:
    return [random_patch(clips[i][1], scale, [seed, epoch, int(i)], clips[i][0]) for i in indices]


def batch_loss(weights, cfg: ModelConfig, samples: Sequence[PatchSample], dtype=np.float32):
    lr, hr = stack_batch(samples, dtype)
    out = girnet_forward([Tensor(a) for a in lr], weights, cfg)
    return charbonnier_loss(out, hr), out, hr


def _to_checkpoint(cfg, weights, state, epoch, step, seed) -> Checkpoint:
    return Checkpoint(cfg, {k: t.data.copy() for k, t in weights.items()}, state, epoch, step, seed)


def _snapshot_state(state: OptimState) -> OptimState:
    return OptimState(
        {k: v.copy() for k, v in state.m.items()},
        {k: v.copy() for k, v in state.v.items()},
        state.t,
        state.beta1,
        state.beta2,
        state.eps,
        state.base_lr,
    )


def train(
    clips: Sequence[tuple[str, VideoClip]],
    cfg: ModelConfig,
    epochs: int,
    batch: int = 8,
    seed: int = 0,
    out_dir=None,
    *,
    max_steps: int | None = None,
    resume: Checkpoint | None = None,
    lr_fn: Callable[[int], float] = lr_schedule,
    betas: tuple[float, float] = (0.5, 0.99),
    dtype=np.float32,
    on_step: Callable[[int, int, float, float], None] | None = None,
) -> TrainResult:
    """Train from scratch (or ``resume``) for ``epochs`` epochs or ``max_steps`` steps.

    One epoch takes ceil(len(clips) / batch) steps with one fresh patch per
    clip. The checkpoint is rewritten at the end of every epoch; a NaN loss
    aborts without touching the last good one.
    """
    if not clips:
        raise DataError("no training clips")
    if batch < 1 or epochs < 0:
        raise ValueError("batch must be positive and epochs non-negative")
    steps_per_epoch = math.ceil(len(clips) / batch)
    if resume is not None:
        if resume.config != cfg:
            raise ValueError("resume checkpoint was trained with a different config")
        weights = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True) for k, v in resume.weights.items()}
        state = _snapshot_state(resume.optim) if resume.optim is not None else OptimState.for_params(weights)
        step = resume.step
        seed = resume.seed
    else:
        weights = init_weights(cfg, seed, dtype)
        state = OptimState.for_params(weights, beta1=betas[0], beta2=betas[1])
        step = 0
    check_weights(weights, cfg)
    total = epochs * steps_per_epoch if max_steps is None else min(max_steps, epochs * steps_per_epoch)
    ckpt_path = Path(out_dir) / CHECKPOINT_NAME if out_dir is not None else None
    result = TrainResult(_to_checkpoint(cfg, weights, state, step // steps_per_epoch, step, seed))

    while step < total:
        epoch, within = divmod(step, steps_per_epoch)
        indices = epoch_batches(len(clips), batch, seed, epoch)[within]
        lr = lr_fn(epoch)
        loss, _, _ = batch_loss(weights, cfg, sample_batch(clips, indices, cfg.scale, seed, epoch), dtype)
        value = float(loss.data[0])
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at epoch {epoch} step {step}")
        grads = reverse_accumulate(loss, weights)
        del loss  # drop the graph before the next forward pass
        weights = adam_step(weights, grads, state, lr)
        del grads
        result.log.append((epoch, step, value, lr))
        if on_step is not None:
            on_step(epoch, step, value, lr)
        step += 1
        if step % steps_per_epoch == 0 or step == total:
            result.checkpoint = _to_checkpoint(cfg, weights, _snapshot_state(state), step // steps_per_epoch, step, seed)
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, result.checkpoint)
    return result


def weights_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in ckpt.weights.items()}


def predict_clip(weights, cfg: ModelConfig, lr_frames: Sequence[np.ndarray], dtype=np.float32) -> list[np.ndarray]:
    """Run the network on one LR clip; returns clamped (3, sH, sW) frames."""
    if len(lr_frames) < 2:
        raise DataError(f"need >= 2 frames, got {len(lr_frames)}")
    with no_grad():
        out = girnet_forward([Tensor(np.asarray(f, dtype=dtype)[None]) for f in lr_frames], weights, cfg)
    return [np.clip(o.data[0], 0.0, 1.0) for o in out]


def infer(checkpoint_path, in_dir, out_dir, scale: int | None = None) -> list[Path]:
    ckpt = load_checkpoint(checkpoint_path)
    if scale is not None and scale != ckpt.config.scale:
        raise ValueError(f"requested scale {scale} but checkpoint was trained for x{ckpt.config.scale}")
    clip = load_clip(in_dir)
    if len(clip) < 2:
        raise DataError("need >= 2 frames")
    frames = predict_clip(weights_from_checkpoint(ckpt), ckpt.config, clip.frames)
    save_clip(VideoClip(frames), out_dir)
    return sorted(Path(out_dir).glob("frame_*.ppm"))


def baseline_frames(lr_frames: Sequence[np.ndarray], scale: int) -> list[np.ndarray]:
    """Bicubic upscaling with the previous LR frame repeated for each missing frame."""
    ups = []
    for f in lr_frames:
        _, h, w = f.shape
        ups.append(np.clip(bicubic_resize(f, h * scale, w * scale), 0.0, 1.0))
    return [ups[t // 2] for t in range(2 * len(lr_frames) - 1)]


def mean_psnr(pred_clips, target_clips) -> float:
    return float(np.mean([psnr(p, t) for pc, tc in zip(pred_clips, target_clips) for p, t in zip(pc, tc)]))


# ---------------------------------------------------------------------------
# ablation grid

ABLATIONS = {
    "full": {},
    "conv-instead-of-dconv": {"use_deformable": False},
    "no-global-residual": {"use_global_residual": False},
    "no-gstir-global-info": {"gstir_use_global_info": False},
    "no-gstir-residual": {"gstir_use_residual": False},
}

# full-model minus variant at full training scale on Vimeo90K (PSNR dB, SSIM)
REFERENCE_DELTAS = {
    "conv-instead-of-dconv": (0.89, 0.0053),
    "no-global-residual": (0.123, 0.0030),
    "no-gstir-global-info": (0.80, 0.020),
    "no-gstir-residual": (0.05, 0.003),
}


@dataclass
class AblationRow:
    name: str
    final_loss: float
    psnr: float
    ssim: float


def evaluate_on_patches(weights, cfg, samples: Sequence[PatchSample]) -> tuple[float, float]:
    preds = [predict_clip(weights, cfg, s.lr) for s in samples]
    reports = [evaluate_frames(p, s.hr) for p, s in zip(preds, samples)]
    return float(np.mean([r.mean_psnr for r in reports])), float(np.mean([r.mean_ssim for r in reports]))


def run_ablation(
    clips,
    base_cfg: ModelConfig,
    steps: int,
    variants: Sequence[str] = tuple(ABLATIONS),
    batch: int = 8,
    seed: int = 0,
    lr_fn: Callable[[int], float] = lr_schedule,
    cached: dict[str, AblationRow] | None = None,
) -> list[AblationRow]:
    rows = []
    steps_per_epoch = math.ceil(len(clips) / batch)
    epochs = math.ceil(steps / steps_per_epoch)
    eval_samples = sample_batch(clips, range(len(clips)), base_cfg.scale, seed, 0)
    for name in variants:
        if cached and name in cached:
            rows.append(cached[name])
            continue
        cfg = base_cfg.replace(**ABLATIONS[name])
        res = train(clips, cfg, epochs, batch, seed, max_steps=steps, lr_fn=lr_fn)
        weights = weights_from_checkpoint(res.checkpoint)
        p, s = evaluate_on_patches(weights, cfg, eval_samples)
        rows.append(AblationRow(name, res.losses[-1], p, s))
        logger.info("ablation %s: loss %.5f psnr %.3f ssim %.4f", name, res.losses[-1], p, s)
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    full = next((r for r in rows if r.name == "full"), None)
    lines = [
        "| variant | final loss | PSNR (dB) | SSIM | ΔPSNR vs full | ΔSSIM vs full | reference ΔPSNR | reference ΔSSIM |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        if full is None or r is full:
            dp = ds = "-"
        else:
            dp = f"{full.psnr - r.psnr:+.3f}"
            ds = f"{full.ssim - r.ssim:+.4f}"
        ref = REFERENCE_DELTAS.get(r.name)
        rp, rs = (f"{ref[0]:+.3f}", f"{ref[1]:+.4f}") if ref else ("-", "-")
        lines.append(f"| {r.name} | {r.final_loss:.5f} | {r.psnr:.3f} | {r.ssim:.4f} | {dp} | {ds} | {rp} | {rs} |")
    return "\n".join(lines) + "\n"
