"""Heatmap-regression detector: skip-connected encoder-decoder trained with MSE.

The network maps a grayscale patch to a cell-position heatmap on the same
0-255 scale as its targets. Inputs are scaled to [0, 1] and the final layer's
output is scaled back by 255 inside ``forward``, so training sees healthy
activation magnitudes while the external contract stays on the 0-255 scale.
Inference is deterministic; predictions are clamped to [0, 255].
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledSample, Patch
from .heatmap import Heatmap
from .seeds import rng as seeded_rng, torch_seed


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1.0e-3
    batch_size: int = 16
    seed: int = 0
    width: int = 32
    levels: int = 4


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error averaged over pixels and batch."""
    return ((pred - target) ** 2).mean()


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.c2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.relu(self.c1(x))
        return F.relu(self.c2(x))


class DetectorNet(nn.Module):
    """U-Net style encoder-decoder with skip connections, linear output."""

    def __init__(self, width: int = 32, levels: int = 4, in_channels: int = 1):
        super().__init__()
        widths = [width * 2 ** i for i in range(levels)]
        self.enc = nn.ModuleList(
            [_ConvBlock(in_channels if i == 0 else widths[i - 1], widths[i])
             for i in range(levels)]
        )
        self.dec = nn.ModuleList(
            [_ConvBlock(widths[i] + widths[i + 1], widths[i])
             for i in range(levels - 1)]
        )
        self.head = nn.Conv2d(width, 1, 1)
        self.width = width
        self.levels = levels

    def forward(self, x):
        x = x / 255.0
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for i in reversed(range(len(self.dec))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.dec[i](torch.cat([skips[i], x], dim=1))
        return self.head(x) * 255.0


@dataclass
class DetectorModel:
    """Trained detector with its architecture identity and training record."""

    net: DetectorNet
    sigma: float = 6.0
    training_meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return f"detector/unet-l{self.net.levels}-w{self.net.width}"

    def save(self, path) -> None:
        save_checkpoint(
            path,
            kind="detector",
            fingerprint=self.fingerprint,
            state_dict=self.net.state_dict(),
            training_meta={**self.training_meta,
                           "sigma": self.sigma,
                           "width": self.net.width,
                           "levels": self.net.levels},
        )

    @classmethod
    def load(cls, path) -> "DetectorModel":
        payload = load_checkpoint(path, expected_kind="detector")
        meta = payload["training_meta"]
        net = DetectorNet(width=meta["width"], levels=meta["levels"])
        net.load_state_dict(payload["state_dict"])
        net.eval()
        return cls(net=net, sigma=meta["sigma"], training_meta=meta)


def fresh_detector(cfg: TrainConfig, sigma: float = 6.0) -> DetectorModel:
    """Freshly initialized detector with seeded weights."""
    torch.manual_seed(torch_seed(cfg.seed, "detector-init"))
    net = DetectorNet(width=cfg.width, levels=cfg.levels)
    net.eval()
    return DetectorModel(net=net, sigma=sigma)


def _dataset_digest(samples: list[LabeledSample]) -> str:
    h = hashlib.sha1()
    for s in samples:
        h.update(s.patch.source_id.encode())
        h.update(s.origin.value.encode())
    return h.hexdigest()[:12]


def train_detector(
    init: DetectorModel | None,
    samples: list[LabeledSample],
    cfg: TrainConfig,
    sigma: float = 6.0,
) -> DetectorModel:
    """Train (or continue training) the detector on ``samples`` with Adam + MSE.

    Returns the trained model with a per-epoch loss history in its
    ``training_meta``. Raises :class:`TrainingDivergedError` if the loss goes
    non-finite.
    """
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    shapes = {s.patch.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent patch shapes in training set: {shapes}")
    _check_shape(next(iter(shapes)), cfg.levels if init is None else init.net.levels)

    if init is None:
        model = fresh_detector(cfg, sigma=sigma)
        net = model.net
    else:
        net = copy.deepcopy(init.net)  # warm start without mutating the input model
    net.train()

    x = torch.from_numpy(
        np.stack([s.patch.pixels for s in samples])[:, None, :, :]
    ).float()
    y = torch.from_numpy(
        np.stack([s.heatmap.values for s in samples])[:, None, :, :]
    ).float()

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    order = seeded_rng(cfg.seed, "detector-batches")
    n = len(samples)
    history = []
    for epoch in range(cfg.epochs):
        perm = order.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch_idx = torch.from_numpy(idx.copy())
            optimizer.zero_grad()
            loss = mse_loss(net(x[batch_idx]), y[batch_idx])
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.append(epoch_loss)

    net.eval()
    meta = {
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "dataset_digest": _dataset_digest(samples),
        "n_samples": n,
        "loss_history": history,
    }
    return DetectorModel(net=net, sigma=sigma, training_meta=meta)


def _check_shape(shape: tuple[int, int], levels: int) -> None:
    factor = 2 ** (levels - 1)
    if shape[0] % factor or shape[1] % factor:
        raise ValueError(
            f"patch shape {shape} not divisible by {factor} "
            f"(required by a {levels}-level encoder-decoder)"
        )


def predict_heatmap(model: DetectorModel, patch: Patch) -> Heatmap:
    """Predict the cell-position heatmap for one patch (clamped to [0, 255])."""
    return predict_heatmaps(model, [patch])[0]


def predict_heatmaps(
    model: DetectorModel, patches: list[Patch], batch_size: int = 32
) -> list[Heatmap]:
    """Batched deterministic inference over many patches."""
    net = model.net
    net.eval()
    if patches:
        _check_shape(patches[0].shape, net.levels)
    out: list[Heatmap] = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start:start + batch_size]
            x = torch.from_numpy(
                np.stack([p.pixels for p in chunk])[:, None, :, :]
            ).float()
            pred = net(x).clamp_(0.0, 255.0).numpy()
            out.extend(
                Heatmap(values=pred[i, 0].astype(np.float64), sigma=model.sigma)
                for i in range(len(chunk))
            )
    return out
