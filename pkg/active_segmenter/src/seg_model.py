"""
UNet segmentation network and the auxiliary loss prediction module.
Exposes decoder feature taps for loss prediction and a pooled bottleneck
latent for core-set selection.
"""

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import LossPredictorConfig, SegModelConfig

logger = logging.getLogger(__name__)


def _dropout(x: torch.Tensor, rate: float, active: bool, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Element-wise inverted dropout with masks drawn from an explicit generator."""
    if not active or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) < keep
    return x * mask / keep


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by batch norm and a leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, negative_slope: float):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.LeakyReLU(negative_slope),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class UNet(nn.Module):
    """
    UNet with `depth` encoder and decoder stages.

    Encoder stage i has base_channels * 2**i channels and is followed by 2x2
    max pooling; the bottleneck doubles the deepest width. Each decoder stage
    upsamples with a transposed convolution, concatenates the skip connection
    and applies a ConvBlock. Inputs are zero-padded to a multiple of 2**depth
    and logits are cropped back to the input size.
    """

    def __init__(self, cfg: SegModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]

        self.encoders = nn.ModuleList()
        channels = cfg.in_channels
        for width in widths:
            self.encoders.append(ConvBlock(channels, width, cfg.negative_slope))
            channels = width
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(widths[-1], widths[-1] * 2, cfg.negative_slope)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        channels = widths[-1] * 2
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(channels, width, kernel_size=2, stride=2))
            self.decoders.append(ConvBlock(width * 2, width, cfg.negative_slope))
            channels = width
        self.head = nn.Conv2d(widths[0], cfg.class_count, kernel_size=1)

    @property
    def tap_channels(self) -> list[int]:
        """Channels of each decoder tap, deepest first."""
        return [self.cfg.base_channels * 2 ** i for i in reversed(range(self.cfg.depth))]

    @property
    def latent_dim(self) -> int:
        return self.cfg.base_channels * 2 ** self.cfg.depth

    def forward(
        self,
        x: torch.Tensor,
        stochastic_dropout: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
        """
        Returns:
            Tuple of (logits, decoder taps, pooled bottleneck latent)
        """
        height, width = x.shape[-2:]
        multiple = 2 ** self.cfg.depth
        pad_h, pad_w = (-height) % multiple, (-width) % multiple
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))

        active = self.training or stochastic_dropout
        rate = self.cfg.dropout_rate

        skips = []
        h = x
        for encoder in self.encoders:
            h = encoder(h)
            skips.append(h)
            h = self.pool(h)

        h = self.bottleneck(h)
        latent = h.mean(dim=(2, 3))
        h = _dropout(h, rate, active, generator)

        taps = []
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            h = torch.cat([up(h), skip], dim=1)
            h = decoder(_dropout(h, rate, active, generator))
            taps.append(h)

        logits = self.head(h)[..., :height, :width]
        return logits, taps, latent


class LossPredictor(nn.Module):
    """
    Predicts the segmentation loss of an image from the decoder taps.

    Each tap is global-average-pooled and projected by its own linear layer
    with ReLU; the projections are concatenated and mapped to one scalar.
    """

    def __init__(self, tap_channels: Sequence[int], cfg: LossPredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.projections = nn.ModuleList(nn.Linear(c, cfg.tap_projection_dim) for c in tap_channels)
        self.head = nn.Linear(cfg.tap_projection_dim * len(tap_channels), 1)
        self.register_buffer("trained", torch.tensor(False))

    def forward(self, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(taps) != len(self.projections):
            raise ValueError(f"Expected {len(self.projections)} feature taps, got {len(taps)}")

        features = []
        for i, (tap, projection) in enumerate(zip(taps, self.projections)):
            if tap.ndim != 4 or tap.shape[1] != projection.in_features:
                raise ValueError(
                    f"Tap {i}: expected (N, {projection.in_features}, H, W), got {tuple(tap.shape)}"
                )
            features.append(F.relu(projection(tap.mean(dim=(2, 3)))))
        return self.head(torch.cat(features, dim=1)).squeeze(1)


@dataclass
class ForwardResult:
    """Batched network outputs."""
    logits: torch.Tensor
    probabilities: torch.Tensor
    feature_taps: list[torch.Tensor]
    bottleneck: torch.Tensor


def as_batch(images: Union[np.ndarray, torch.Tensor], in_channels: int = 1) -> torch.Tensor:
    """Images as an (N, C, H, W) float tensor; accepts (N, H, W) for single-channel input."""
    batch = torch.as_tensor(np.asarray(images)) if not isinstance(images, torch.Tensor) else images
    if batch.ndim == 3 and in_channels == 1:
        batch = batch.unsqueeze(1)
    if batch.ndim != 4:
        raise ValueError(f"Expected images of shape (N, H, W) or (N, C, H, W), got {tuple(batch.shape)}")
    if batch.shape[0] < 1:
        raise ValueError("Empty image batch")
    if batch.shape[1] != in_channels:
        raise ValueError(f"Expected {in_channels} input channels, got {batch.shape[1]}")
    if batch.shape[2] < 1 or batch.shape[3] < 1:
        raise ValueError(f"Degenerate image size {tuple(batch.shape[2:])}")
    return batch if batch.is_floating_point() else batch.float()


def forward(
    model: UNet,
    images: Union[np.ndarray, torch.Tensor],
    stochastic_dropout: bool = False,
    generator: Optional[torch.Generator] = None,
) -> ForwardResult:
    """
    Run the UNet on a batch.

    Batch norm follows the module's train/eval mode. Dropout is active in
    training mode or when stochastic_dropout is set, with masks drawn from
    `generator`.
    """
    param = next(model.parameters())
    batch = as_batch(images, model.cfg.in_channels).to(device=param.device, dtype=param.dtype)
    logits, taps, latent = model(batch, stochastic_dropout=stochastic_dropout, generator=generator)
    return ForwardResult(
        logits=logits,
        probabilities=torch.softmax(logits, dim=1),
        feature_taps=taps,
        bottleneck=latent,
    )


def predict_loss(loss_predictor: LossPredictor, feature_taps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Predicted loss per image, shape (N,)."""
    return loss_predictor(feature_taps)


def ranking_loss(pred_losses: torch.Tensor, true_losses: torch.Tensor, margin: float) -> torch.Tensor:
    """
    Pairwise margin ranking loss over consecutive pairs (0, 1), (2, 3), ...

    Each pair contributes max(0, -sign(l_i - l_j) * (p_i - p_j) + margin).
    With an odd batch the last element is dropped.
    """
    if pred_losses.shape != true_losses.shape or pred_losses.ndim != 1:
        raise ValueError(
            f"Predicted {tuple(pred_losses.shape)} and true {tuple(true_losses.shape)} losses must be equal 1D shapes"
        )
    n = (pred_losses.shape[0] // 2) * 2
    if n == 0:
        raise ValueError("Ranking loss needs at least two samples")

    true_losses = true_losses.detach()
    sign = torch.sign(true_losses[0:n:2] - true_losses[1:n:2])
    gap = pred_losses[0:n:2] - pred_losses[1:n:2]
    return torch.clamp(-sign * gap + margin, min=0.0).mean()


def count_parameters(module: nn.Module) -> int:
    """Trainable parameter count."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def checkpoint_name(cycle: int, seed: int) -> str:
    return f"model_c{cycle:02d}_s{seed}.pt"


def weights_digest(*modules: Optional[nn.Module]) -> str:
    """SHA-256 over parameter and buffer values, in state_dict order."""
    digest = hashlib.sha256()
    for module in modules:
        if module is None:
            continue
        for name, tensor in module.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class TrainedModel:
    """
    A UNet (and optional loss predictor) ready for inference.

    All prediction methods take numpy image batches (N, H, W), run in
    inference mode and return numpy arrays.
    """

    def __init__(
        self,
        unet: UNet,
        loss_predictor: Optional[LossPredictor] = None,
        device: str = "cpu",
    ):
        self.unet = unet.to(device)
        self.loss_predictor = loss_predictor.to(device) if loss_predictor is not None else None
        self.device = device

    @property
    def cfg(self) -> SegModelConfig:
        return self.unet.cfg

    @property
    def has_dropout(self) -> bool:
        return self.cfg.dropout_rate > 0.0

    @property
    def is_loss_predictor_trained(self) -> bool:
        return self.loss_predictor is not None and bool(self.loss_predictor.trained)

    def _chunks(self, images: np.ndarray, batch_size: int):
        images = np.asarray(images)
        for start in range(0, len(images), batch_size):
            yield images[start:start + batch_size]

    @torch.no_grad()
    def predict_probabilities(
        self,
        images: np.ndarray,
        stochastic_dropout: bool = False,
        generator: Optional[torch.Generator] = None,
        batch_size: int = 32,
    ) -> np.ndarray:
        """Softmax maps (N, C, H, W) in float64."""
        self.unet.eval()
        outputs = []
        for chunk in self._chunks(images, batch_size):
            result = forward(self.unet, chunk, stochastic_dropout=stochastic_dropout, generator=generator)
            outputs.append(torch.softmax(result.logits.double(), dim=1).cpu().numpy())
        return np.concatenate(outputs, axis=0)

    def predict_masks(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        return self.predict_probabilities(images, batch_size=batch_size).argmax(axis=1)

    @torch.no_grad()
    def predict_losses(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        if self.loss_predictor is None:
            raise ValueError("Model has no loss predictor")
        self.unet.eval()
        self.loss_predictor.eval()
        outputs = []
        for chunk in self._chunks(images, batch_size):
            result = forward(self.unet, chunk)
            outputs.append(predict_loss(self.loss_predictor, result.feature_taps).double().cpu().numpy())
        return np.concatenate(outputs, axis=0)

    @torch.no_grad()
    def latents(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Pooled bottleneck features (N, D)."""
        self.unet.eval()
        outputs = [forward(self.unet, chunk).bottleneck.double().cpu().numpy()
                   for chunk in self._chunks(images, batch_size)]
        return np.concatenate(outputs, axis=0)

    def digest(self) -> str:
        return weights_digest(self.unet, self.loss_predictor)

    def save(self, path: Union[str, Path], config_digest: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "config_digest": config_digest,
            "model_config": dataclasses.asdict(self.cfg),
            "unet": self.unet.state_dict(),
            "loss_predictor_config": (
                dataclasses.asdict(self.loss_predictor.cfg) if self.loss_predictor is not None else None
            ),
            "loss_predictor": self.loss_predictor.state_dict() if self.loss_predictor is not None else None,
        }
        torch.save(payload, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path], device: str = "cpu") -> tuple["TrainedModel", str]:
        """
        Returns:
            Tuple of (model, config digest stored with the weights)
        """
        payload = torch.load(path, map_location=device, weights_only=False)
        model_cfg = SegModelConfig(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in payload["model_config"].items()
        })
        unet = UNet(model_cfg)
        unet.load_state_dict(payload["unet"])

        loss_predictor = None
        if payload.get("loss_predictor") is not None:
            loss_predictor = LossPredictor(unet.tap_channels, LossPredictorConfig(**payload["loss_predictor_config"]))
            loss_predictor.load_state_dict(payload["loss_predictor"])

        return cls(unet, loss_predictor, device=device), payload["config_digest"]


def init_model(
    model_cfg: SegModelConfig,
    seed: int,
    loss_cfg: Optional[LossPredictorConfig] = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[UNet, Optional[LossPredictor]]:
    """Freshly initialized networks; identical for equal seeds."""
    torch.manual_seed(seed)
    unet = UNet(model_cfg).to(dtype)
    loss_predictor = LossPredictor(unet.tap_channels, loss_cfg).to(dtype) if loss_cfg is not None else None
    logger.debug(f"Initialized UNet with {count_parameters(unet)} parameters (seed {seed})")
    return unet, loss_predictor
