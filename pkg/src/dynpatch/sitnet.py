"""Screen image transformation network.

Two 3x3 convolutions (3 -> hidden -> 3) with a ReLU in between predict how an
image shown on the patch-car screen looks once captured by the camera. The
head squashes smoothly into (0, 1).
"""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .artifacts import load_arrays, read_json, save_arrays, sha256_json
from .errors import ValidationError

log = logging.getLogger(__name__)

PARAMS_FORMAT = "dynpatch-sitnet"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.02  # perceptual
    beta: float = 0.01   # total variation

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValidationError("loss weights must be non-negative")


@dataclass(frozen=True)
class SitNetConfig:
    hidden: int = 16
    kernel: int = 3
    head: str = "softclip"
    sharpness: float = 50.0
    init: str = "near_identity"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16
    val_fraction: float = 0.2
    feature_cut: int = 1
    tv_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValidationError("kernel size must be odd")
        if self.head not in ("softclip", "sigmoid", "linear"):
            raise ValidationError(f"unknown head {self.head!r}")
        if self.init not in ("identity", "near_identity", "random"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.hidden < 3:
            raise ValidationError("need at least 3 hidden channels")


def softclip(x: torch.Tensor, sharpness: float) -> torch.Tensor:
    """Smooth clamp to (0, 1): ``x - softplus(x - 1) + softplus(-x)`` at the given sharpness."""
    return x - F.softplus(x - 1.0, beta=sharpness) + F.softplus(-x, beta=sharpness)


class SitNet(nn.Module):
    def __init__(self, config: SitNetConfig = SitNetConfig()):
        super().__init__()
        self.config = config
        pad = config.kernel // 2
        self.conv1 = nn.Conv2d(3, config.hidden, config.kernel, padding=pad, padding_mode="replicate")
        self.conv2 = nn.Conv2d(config.hidden, 3, config.kernel, padding=pad, padding_mode="replicate")

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        if self.config.head == "softclip":
            return softclip(y, self.config.sharpness)
        if self.config.head == "sigmoid":
            return torch.sigmoid(y)
        return y


SitNetParams = SitNet


def build_sitnet(config: SitNetConfig = SitNetConfig(), seed: int | None = None) -> SitNet:
    torch.manual_seed(config.seed if seed is None else seed)
    net = SitNet(config)
    if config.init == "random":
        return net
    c = config.kernel // 2
    with torch.no_grad():
        w1, w2 = net.conv1.weight, net.conv2.weight
        if config.init == "identity":
            w1.zero_()
            net.conv1.bias.zero_()
        else:
            # spare hidden units start random but feed the output through zero weights
            w1[:3].zero_()
            net.conv1.bias[:3].zero_()
            net.conv1.bias[3:].uniform_(-1.0, 0.5)
        w2.zero_()
        net.conv2.bias.zero_()
        for ch in range(3):
            w1[ch, ch, c, c] = 1.0
            w2[ch, ch, c, c] = 1.0
    return net


def _as_batch(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.ndim == 3:
        return image[None], True
    if image.ndim == 4:
        return image, False
    raise ValidationError(f"expected CxHxW or BxCxHxW image, got {tuple(image.shape)}")


def sit_forward(params: SitNet, image: torch.Tensor) -> torch.Tensor:
    """Predicted captured appearance; same shape as ``image``."""
    x, single = _as_batch(image)
    if x.shape[1] != 3:
        raise ValidationError(f"expected 3 channels, got {x.shape[1]}")
    y = params(x.to(params.conv1.weight.dtype))
    return y[0] if single else y


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return ((pred - target) ** 2).mean()


class FeatureExtractor(nn.Module):
    """Frozen leading conv blocks of a detector, used for the perceptual term."""

    def __init__(self, blocks: nn.ModuleList | list, cut: int):
        super().__init__()
        if not 0 <= cut < len(blocks):
            raise ValidationError(f"cut {cut} outside 0..{len(blocks) - 1}")
        self.cut = cut
        self.blocks = nn.ModuleList(copy.deepcopy(list(blocks)[: cut + 1]))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen, including batch-norm statistics
        return super().train(False)

    @classmethod
    def from_detector(cls, detector, cut: int = 1) -> FeatureExtractor:
        return cls(detector.blocks, cut)

    def forward(self, x):
        x, _ = _as_batch(x)
        x = x.to(next(self.parameters()).dtype)
        for blk in self.blocks:
            x = blk(x)
        return x


def perceptual_loss(extractor: FeatureExtractor, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return mse_loss(extractor(pred), extractor(target))


def tv_loss(pred: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Anisotropic total variation: summed absolute horizontal and vertical differences.

    ``reduction="mean"`` divides the sum by the number of image elements.
    """
    dh = (pred[..., :, 1:] - pred[..., :, :-1]).abs().sum()
    dv = (pred[..., 1:, :] - pred[..., :-1, :]).abs().sum()
    total = dh + dv
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / pred.numel()
    raise ValidationError(f"unknown reduction {reduction!r}")


def combined_loss(weights: LossWeights, extractor: FeatureExtractor, pred: torch.Tensor,
                  target: torch.Tensor, tv_reduction: str = "mean") -> torch.Tensor:
    """``mse + alpha * perceptual + beta * tv``."""
    loss = mse_loss(pred, target)
    if weights.alpha:
        loss = loss + weights.alpha * perceptual_loss(extractor, pred, target)
    if weights.beta:
        loss = loss + weights.beta * tv_loss(pred, tv_reduction)
    return loss


@dataclass
class SitNetCurve:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    baseline_val_mse: float = math.nan
    n_train: int = 0
    n_val: int = 0


def split_pairs(pairs, val_fraction: float, seed: int):
    n = len(pairs)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    val = [pairs[i] for i in perm[:n_val]]
    train = [pairs[i] for i in perm[n_val:]]
    return train, val


def train_sitnet(pairs, extractor: FeatureExtractor, weights: LossWeights = LossWeights(),
                 epochs: int | None = None, lr: float | None = None, seed: int | None = None,
                 config: SitNetConfig = SitNetConfig()):
    """Fit the network to (displayed, captured) pairs with Adam.

    Returns ``(model, SitNetCurve)``; the curve holds per-epoch training and
    validation losses plus the validation MSE of predicting the input unchanged.
    """
    if not pairs:
        raise ValidationError("no training pairs")
    config = dataclasses.replace(config, epochs=config.epochs if epochs is None else epochs,
                                 lr=config.lr if lr is None else lr, seed=config.seed if seed is None else seed)
    train, val = split_pairs(list(pairs), config.val_fraction, config.seed)
    x_tr = torch.stack([p[0] for p in train]).float()
    y_tr = torch.stack([p[1] for p in train]).float()
    x_va = torch.stack([p[0] for p in val]).float() if val else x_tr[:0]
    y_va = torch.stack([p[1] for p in val]).float() if val else y_tr[:0]

    model = build_sitnet(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    curve = SitNetCurve(n_train=len(train), n_val=len(val))
    if len(val):
        curve.baseline_val_mse = float(mse_loss(x_va, y_va))
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(x_tr), generator=gen)
        total = 0.0
        for s in range(0, len(x_tr), config.batch_size):
            idx = perm[s:s + config.batch_size]
            loss = combined_loss(weights, extractor, model(x_tr[idx]), y_tr[idx], config.tv_reduction)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        curve.train_loss.append(total / len(x_tr))
        model.eval()
        if len(val):
            with torch.no_grad():
                pred = model(x_va)
                curve.val_loss.append(float(combined_loss(weights, extractor, pred, y_va, config.tv_reduction)))
                curve.val_mse.append(float(mse_loss(pred, y_va)))
        log.debug("sitnet epoch %d train %.5f", epoch, curve.train_loss[-1])
    return model.eval(), curve


def config_hash(config: SitNetConfig) -> str:
    return sha256_json(dataclasses.asdict(config))


def save_sitnet(model: SitNet, path, extra: dict | None = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": PARAMS_FORMAT, "version": PARAMS_VERSION,
            "config": dataclasses.asdict(model.config), "config_hash": config_hash(model.config)}
    meta.update(extra or {})
    save_arrays(path, arrays, meta)


def load_sitnet(path) -> SitNet:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta.get("format") != PARAMS_FORMAT or meta.get("version") != PARAMS_VERSION:
        raise ValidationError(f"{path} is not a supported SIT-Net file")
    model = SitNet(SitNetConfig(**meta["config"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in load_arrays(path).items()})
    return model.eval()
