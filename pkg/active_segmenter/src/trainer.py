"""
From-scratch training of the segmentation model for one AL cycle.
Fixed step count, linear warmup then cosine decay, rotation and noise augmentation.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossPredictorConfig, SegModelConfig, TrainConfig
from .data_pipeline import SliceSample
from .image_utils import rotate_plane
from .seg_model import TrainedModel, forward, init_model, ranking_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainHistory:
    """Per-epoch record of one training run."""
    epoch_losses: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "lr_trace": self.lr_trace,
            "steps": self.steps,
            "wall_time": self.wall_time,
        }


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Learning rate at an optimizer step.

    Linear ramp from lr_init to warmup_factor * lr_init over the warmup
    steps, then cosine decay reaching 0 at the final step.
    """
    total = cfg.total_steps
    if not 0 <= step < total:
        raise ValueError(f"step must be in [0, {total}), got {step}")

    peak = cfg.lr_init * cfg.warmup_factor
    warmup_steps = cfg.warmup_epochs * cfg.iters_per_epoch
    if step < warmup_steps:
        return cfg.lr_init + (peak - cfg.lr_init) * step / warmup_steps

    progress = (step - warmup_steps) / max(1, total - 1 - warmup_steps)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


def augment(
    sample: SliceSample,
    rng: np.random.Generator,
    rotation_deg: Sequence[float] = (-10.0, 10.0),
    noise_sigma: float = 0.01,
) -> SliceSample:
    """
    Rotate image and mask by the same random angle, then add Gaussian noise to the image.

    The image uses bilinear interpolation, the mask nearest-neighbour; both
    are zero-filled at the borders. The noisy image is not clipped.
    """
    angle = float(rng.uniform(rotation_deg[0], rotation_deg[1]))
    image = rotate_plane(np.asarray(sample.image, dtype=np.float32), angle, order=1, cval=0.0)
    mask = rotate_plane(np.asarray(sample.mask), angle, order=0, cval=0)
    if noise_sigma > 0.0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)

    return replace(sample, image=image.astype(np.float32), mask=mask)


def _configure_torch(num_threads: Optional[int]) -> None:
    torch.use_deterministic_algorithms(True, warn_only=True)
    if num_threads:
        torch.set_num_threads(num_threads)


def train(
    model_cfg: SegModelConfig,
    labelled: Sequence[SliceSample],
    cfg: TrainConfig,
    with_loss_module: bool = False,
    loss_cfg: Optional[LossPredictorConfig] = None,
    device: str = "cpu",
    num_threads: Optional[int] = None,
) -> tuple[TrainedModel, TrainHistory]:
    """
    Train a freshly initialized model on the labelled slices.

    Every run performs exactly epochs * iters_per_epoch optimizer steps; each
    batch draws batch_size slices uniformly with replacement. The weights
    after the final step are returned. With the loss module the objective is
    CE + loss_weight * ranking loss and both networks update together.

    Args:
        model_cfg: UNet architecture
        labelled: Annotated training slices
        cfg: Training protocol (its seed fixes initialization, sampling and augmentation)
        with_loss_module: Train a loss predictor jointly
        loss_cfg: Loss predictor settings (defaults when omitted)

    Returns:
        Tuple of (trained model, history)
    """
    if not labelled:
        raise ValueError("Cannot train on an empty labelled set")

    _configure_torch(num_threads)
    if with_loss_module and loss_cfg is None:
        loss_cfg = LossPredictorConfig()

    unet, loss_predictor = init_model(model_cfg, cfg.seed, loss_cfg if with_loss_module else None)
    unet = unet.to(device)
    params = list(unet.parameters())
    if loss_predictor is not None:
        loss_predictor = loss_predictor.to(device)
        params += list(loss_predictor.parameters())

    optimizer = torch.optim.Adam(params, lr=lr_at(0, cfg), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    dropout_generator = torch.Generator(device=device).manual_seed(cfg.seed)

    logger.info(
        f"Training on {len(labelled)} slices: {cfg.epochs} epochs x {cfg.iters_per_epoch} steps"
        f"{' with loss prediction' if loss_predictor is not None else ''}"
    )

    history = TrainHistory()
    started = time.perf_counter()
    unet.train()
    if loss_predictor is not None:
        loss_predictor.train()

    step = 0
    for epoch in range(cfg.epochs):
        history.lr_trace.append(lr_at(step, cfg))
        detach = (
            loss_predictor is not None
            and loss_cfg.detach_features
            and epoch >= loss_cfg.detach_after_epoch
        )
        running = 0.0

        for _ in range(cfg.iters_per_epoch):
            lr = lr_at(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            indices = rng.integers(0, len(labelled), size=cfg.batch_size)
            batch = [augment(labelled[i], rng, cfg.aug_rotation_deg, cfg.aug_noise_sigma) for i in indices]
            images = torch.from_numpy(np.stack([b.image for b in batch])).unsqueeze(1).to(device)
            targets = torch.from_numpy(np.stack([b.mask for b in batch]).astype(np.int64)).to(device)

            result = forward(unet, images, generator=dropout_generator)
            per_image = F.cross_entropy(result.logits, targets, reduction="none").mean(dim=(1, 2))
            ce = per_image.mean()
            loss = ce

            if loss_predictor is not None and cfg.batch_size >= 2:
                taps = [t.detach() for t in result.feature_taps] if detach else result.feature_taps
                loss = ce + loss_cfg.loss_weight * ranking_loss(loss_predictor(taps), per_image, loss_cfg.margin)

            if not torch.isfinite(loss):
                raise FloatingPointError(f"Non-finite training loss at step {step} (epoch {epoch})")

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            running += ce.item()
            step += 1

        history.epoch_losses.append(running / cfg.iters_per_epoch)
        logger.debug(f"Epoch {epoch + 1}/{cfg.epochs}: CE {history.epoch_losses[-1]:.4f}, lr {history.lr_trace[-1]:.2e}")

    history.steps = step
    history.wall_time = time.perf_counter() - started
    if loss_predictor is not None:
        loss_predictor.trained.fill_(True)

    logger.info(
        f"Training done: {step} steps, final CE {history.epoch_losses[-1]:.4f}, {history.wall_time:.1f}s"
    )
    return TrainedModel(unet, loss_predictor, device=device), history
