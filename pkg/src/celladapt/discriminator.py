"""Dropout-Bayesian discriminator for pseudo-heatmap quality.

A residual binary classifier takes (patch, heatmap) stacked as two channels
and predicts whether the heatmap is a correct cell-position map for the
patch. Dropout stays live at inference: T stochastic passes with independent
masks give an averaged positive-class probability, and the binary entropy of
that average quantifies uncertainty. Candidates are ranked by entropy and
the most certain fraction is selected for self-training.

Dropout masks are drawn from explicitly passed generators, never from global
RNG state, so stochastic inference is reproducible per call and safe for
concurrent callers that bring their own seeds.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Patch
from .detector import TrainingDivergedError, _dataset_digest  # shared plumbing
from .heatmap import Heatmap, PointSet
from .seeds import rng as seeded_rng, torch_seed


def binary_entropy(p: float) -> float:
    """Binary entropy in nats, with the 0 * ln 0 = 0 convention."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"probability must be in [0, 1], got {p}")
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log(p) - (1.0 - p) * math.log(1.0 - p)


@dataclass(frozen=True)
class UncertaintyScore:
    """Averaged positive-class probability and its binary entropy over T passes."""

    mean_prob: float
    entropy: float
    n_samples: int

    @classmethod
    def from_probs(cls, probs: list[float] | np.ndarray) -> "UncertaintyScore":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.size < 1:
            raise ValueError("need at least one probability")
        mean = float(probs.mean())
        return cls(mean_prob=mean, entropy=binary_entropy(mean),
                   n_samples=int(probs.size))


@dataclass(eq=False)
class PseudoCandidate:
    """A target patch with its regenerated pseudo heatmap and selection state."""

    patch: Patch
    pseudo_heatmap: Heatmap
    detected_points: PointSet
    score: UncertaintyScore | None = None
    admitted_iteration: int | None = None

    @property
    def predicted_label(self) -> bool | None:
        """True = the discriminator calls the pseudo heatmap correct."""
        if self.score is None:
            return None
        return self.score.mean_prob >= 0.5


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or p <= 0:
        return x
    mask = (torch.rand(x.shape, generator=gen) >= p).to(x.dtype)
    return x * mask / (1.0 - p)


def _conv3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)


class _ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.c1 = _conv3(in_ch, out_ch, stride)
        self.b1 = nn.BatchNorm2d(out_ch)
        self.c2 = _conv3(out_ch, out_ch)
        self.b2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.down = None

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        y = F.relu(self.b1(self.c1(x)))
        y = self.b2(self.c2(y))
        return F.relu(y + identity)


class DiscriminatorNet(nn.Module):
    """18-layer residual classifier over 2-channel (patch, heatmap) input.

    Dropout (rate ``dropout_rate``) is applied after each residual stage and
    before the final fully-connected layer, but only when a generator is
    passed to ``forward`` — a ``None`` generator gives the deterministic
    network.
    """

    def __init__(self, width: int = 64, dropout_rate: float = 0.3, in_channels: int = 2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = width
        for i, out_ch in enumerate([width, 2 * width, 4 * width, 8 * width]):
            stages.append(nn.Sequential(
                _ResidualBlock(in_ch, out_ch, stride=1 if i == 0 else 2),
                _ResidualBlock(out_ch, out_ch),
            ))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(8 * width, 2)
        self.width = width
        self.dropout_rate = dropout_rate

    def forward(self, x, dropout_generator: torch.Generator | None = None):
        x = x / 255.0
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            x = _dropout(x, self.dropout_rate, dropout_generator)
        x = x.mean(dim=(2, 3))
        x = _dropout(x, self.dropout_rate, dropout_generator)
        return self.fc(x)


@dataclass
class DiscriminatorModel:
    net: DiscriminatorNet
    training_meta: dict = field(default_factory=dict)

    @property
    def dropout_rate(self) -> float:
        return self.net.dropout_rate

    @property
    def fingerprint(self) -> str:
        return f"discriminator/resnet18-w{self.net.width}-d{self.net.dropout_rate}"

    def save(self, path) -> None:
        save_checkpoint(
            path,
            kind="discriminator",
            fingerprint=self.fingerprint,
            state_dict=self.net.state_dict(),
            training_meta={**self.training_meta,
                           "width": self.net.width,
                           "dropout_rate": self.net.dropout_rate},
        )

    @classmethod
    def load(cls, path) -> "DiscriminatorModel":
        payload = load_checkpoint(path, expected_kind="discriminator")
        meta = payload["training_meta"]
        net = DiscriminatorNet(width=meta["width"], dropout_rate=meta["dropout_rate"])
        net.load_state_dict(payload["state_dict"])
        net.eval()
        return cls(net=net, training_meta=meta)


@dataclass
class DiscriminatorTrainConfig:
    epochs: int = 200
    lr: float = 1.0e-3
    batch_size: int = 16
    seed: int = 0
    width: int = 64
    dropout_rate: float = 0.3


def fresh_discriminator(cfg: DiscriminatorTrainConfig) -> DiscriminatorModel:
    torch.manual_seed(torch_seed(cfg.seed, "discriminator-init"))
    net = DiscriminatorNet(width=cfg.width, dropout_rate=cfg.dropout_rate)
    net.eval()
    return DiscriminatorModel(net=net)


def _stack_pair(patch: Patch, heatmap: Heatmap) -> np.ndarray:
    if patch.shape != heatmap.shape:
        raise ValueError(
            f"{patch.source_id}: heatmap shape {heatmap.shape} != patch {patch.shape}"
        )
    return np.stack([patch.pixels.astype(np.float32),
                     heatmap.values.astype(np.float32)])


def train_discriminator(
    init: DiscriminatorModel | None,
    positives: list[tuple[Patch, Heatmap]],
    negatives: list[tuple[Patch, Heatmap]],
    cfg: DiscriminatorTrainConfig,
) -> DiscriminatorModel:
    """Train the discriminator with cross-entropy on positive/negative pairs.

    Negatives that are bit-identical to a positive of the same patch are
    rejected: such a pair is unlabelable by construction.
    """
    if not positives or not negatives:
        raise ValueError("both positive and negative pairs are required")
    pos_by_id = {p.source_id: h for p, h in positives}
    for p, h in negatives:
        twin = pos_by_id.get(p.source_id)
        if twin is not None and np.array_equal(twin.values, h.values):
            raise ValueError(
                f"negative for {p.source_id} is identical to its positive heatmap"
            )

    if init is None:
        model = fresh_discriminator(cfg)
        net = model.net
    else:
        net = copy.deepcopy(init.net)
    net.train()

    pairs = positives + negatives
    x = torch.from_numpy(np.stack([_stack_pair(p, h) for p, h in pairs]))
    labels = torch.cat([torch.ones(len(positives), dtype=torch.long),
                        torch.zeros(len(negatives), dtype=torch.long)])

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    order = seeded_rng(cfg.seed, "discriminator-batches")
    drop_gen = torch.Generator().manual_seed(torch_seed(cfg.seed, "discriminator-dropout"))
    n = len(pairs)
    history = []
    for epoch in range(cfg.epochs):
        perm = order.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[start:start + cfg.batch_size].copy())
            optimizer.zero_grad()
            logits = net(x[idx], dropout_generator=drop_gen)
            loss = F.cross_entropy(logits, labels[idx])
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
        "n_positives": len(positives),
        "n_negatives": len(negatives),
        "loss_history": history,
    }
    return DiscriminatorModel(net=net, training_meta=meta)


def predict_prob(model: DiscriminatorModel, patch: Patch, heatmap: Heatmap) -> float:
    """Deterministic (dropout-off) positive-class probability."""
    model.net.eval()
    with torch.no_grad():
        x = torch.from_numpy(_stack_pair(patch, heatmap))[None]
        return float(F.softmax(model.net(x), dim=1)[0, 1])


def mc_predict(
    model: DiscriminatorModel,
    patch: Patch,
    heatmap: Heatmap,
    T: int = 10,
    rng_seed: int = 0,
) -> UncertaintyScore:
    """T stochastic forward passes with independent dropout masks.

    Deterministic given ``rng_seed``. With ``dropout_rate == 0`` all passes
    coincide with the deterministic prediction.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    model.net.eval()
    gen = torch.Generator().manual_seed(int(rng_seed) & 0x7FFFFFFFFFFFFFFF)
    x = torch.from_numpy(_stack_pair(patch, heatmap))[None]
    probs = []
    with torch.no_grad():
        for _ in range(T):
            logits = model.net(x, dropout_generator=gen)
            probs.append(float(F.softmax(logits, dim=1)[0, 1]))
    return UncertaintyScore.from_probs(probs)


def mc_predict_batch(
    model: DiscriminatorModel,
    pairs: list[tuple[Patch, Heatmap]],
    T: int = 10,
    rng_seed: int = 0,
    batch_size: int = 16,
) -> list[UncertaintyScore]:
    """Batched MC-dropout scoring; deterministic given seed and pair order."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    model.net.eval()
    gen = torch.Generator().manual_seed(int(rng_seed) & 0x7FFFFFFFFFFFFFFF)
    scores: list[UncertaintyScore] = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            x = torch.from_numpy(np.stack([_stack_pair(p, h) for p, h in chunk]))
            probs = np.empty((T, len(chunk)), dtype=np.float64)
            for t in range(T):
                logits = model.net(x, dropout_generator=gen)
                probs[t] = F.softmax(logits, dim=1)[:, 1].numpy()
            scores.extend(UncertaintyScore.from_probs(probs[:, i])
                          for i in range(len(chunk)))
    return scores


def select_confident(
    candidates: list[PseudoCandidate], th_u: float
) -> list[PseudoCandidate]:
    """Keep the most certain positive candidates.

    The quota is ceil(th_u * |candidates|), filled from candidates predicted
    CORRECT in ascending entropy order (ties broken by source_id); fewer are
    returned when positives run out. Inputs are not mutated.
    """
    if not (0 < th_u <= 1):
        raise ValueError(f"th_u must be in (0, 1], got {th_u}")
    for cand in candidates:
        if cand.score is None:
            raise ValueError(f"candidate {cand.patch.source_id} has no score")
    quota = math.ceil(th_u * len(candidates))
    positives = [c for c in candidates if c.predicted_label]
    positives.sort(key=lambda c: (c.score.entropy, c.patch.source_id))
    return positives[:quota]
