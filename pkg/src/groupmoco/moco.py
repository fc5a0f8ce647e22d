"""Stage 1: momentum-contrast pretraining of the patch encoder.

The query encoder is trained by SGD on the InfoNCE objective; the key encoder
only ever moves by the momentum rule and supplies the positives and the FIFO
queue of negatives.
"""

from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .augment import AugmentConfig, two_view_augment
from .datasets import DatasetManifest
from .errors import ConfigError, ContractViolation, DomainError, IntegrityError, TrainingFault

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "groupmoco-stage1 v1"
BACKBONES = ("tiny_conv", "resnet18")


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "resnet18"
    output_dim: int = 512
    projection_dim: int = 128
    projection: bool = True
    # conv widths of the tiny_conv backbone (one stride-2 block each)
    widths: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.output_dim <= 0 or self.projection_dim <= 0:
            raise ConfigError("output_dim and projection_dim must be positive")
        if not self.widths:
            raise ConfigError("tiny_conv needs at least one conv layer")


@dataclass(frozen=True)
class Stage1Config:
    K: int = 4096
    m: float = 0.999
    tau: float = 0.2
    batch_size: int = 64
    epochs: int = 200
    base_lr: float = 0.03
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.K < 1:
            raise ConfigError("K and batch_size must be positive")
        if self.K % self.batch_size:
            raise ConfigError(f"queue size K={self.K} must be divisible by batch_size={self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.m <= 1:
            raise ConfigError("momentum m must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("temperature tau must be positive")


class TinyConv(nn.Module):
    """Small conv stack, then a linear map to ``output_dim``.

    Hidden blocks use GroupNorm (no batch statistics). The last block is left
    unnormalised: per-image normalisation right before global pooling would
    wipe out the channel statistics the embedding is made of.
    """

    def __init__(self, widths: Sequence[int], output_dim: int):
        super().__init__()
        layers = []
        c_in = 3
        for i, w in enumerate(widths):
            last = i == len(widths) - 1
            layers.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1, bias=last))
            if not last:
                layers.append(nn.GroupNorm(min(8, w), w))
            layers.append(nn.ReLU(inplace=True))
            c_in = w
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, output_dim)

    def forward(self, x):
        x = self.body(x)
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


def build_backbone(enc: EncoderConfig) -> nn.Module:
    if enc.backbone == "tiny_conv":
        return TinyConv(enc.widths, enc.output_dim)
    net = torchvision.models.resnet18(weights=None)
    net.fc = nn.Identity() if enc.output_dim == 512 else nn.Linear(512, enc.output_dim)
    return net


class Encoder(nn.Module):
    """Backbone plus contrastive projection head.

    ``features`` gives the ``output_dim`` embedding used downstream; ``forward``
    gives the projection used by the loss.
    """

    def __init__(self, enc: EncoderConfig):
        super().__init__()
        self.config = enc
        self.backbone = build_backbone(enc)
        n_o = enc.output_dim
        if enc.projection:
            self.head = nn.Sequential(nn.Linear(n_o, n_o), nn.ReLU(inplace=True), nn.Linear(n_o, enc.projection_dim))
        else:
            self.head = nn.Linear(n_o, enc.projection_dim)

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.head(self.backbone(x))


@dataclass
class MoCoState:
    encoder_q: Encoder
    encoder_k: Encoder
    queue: torch.Tensor
    queue_ptr: int
    m: float
    tau: float
    optimizer: torch.optim.Optimizer
    config: Stage1Config
    rng: np.random.Generator
    step: int = 0

    @property
    def K(self) -> int:
        return self.queue.shape[0]


def init_moco(enc: EncoderConfig, cfg: Stage1Config, seed: int | None = None) -> MoCoState:
    seed = cfg.seed if seed is None else seed
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    encoder_q = Encoder(enc)
    encoder_k = copy.deepcopy(encoder_q)
    for p in encoder_k.parameters():
        p.requires_grad_(False)
    queue = F.normalize(torch.randn(cfg.K, enc.projection_dim, generator=gen), dim=1)
    optimizer = torch.optim.SGD(
        encoder_q.parameters(), lr=cfg.base_lr, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay
    )
    return MoCoState(
        encoder_q, encoder_k, queue, 0, cfg.m, cfg.tau, optimizer, cfg, np.random.default_rng(seed)
    )


def _check_unit(name: str, x: torch.Tensor, tol: float = 1e-3) -> None:
    dev = (x.detach().norm(dim=1) - 1).abs()
    if dev.numel() and float(dev.max()) > tol:
        raise ContractViolation(f"{name} rows must be L2-normalised (max deviation {float(dev.max()):.2e})")


def infonce_logits(q: torch.Tensor, k_pos: torch.Tensor, queue: torch.Tensor, tau: float) -> torch.Tensor:
    """``(B, 1 + K)`` logits with the positive in column 0."""
    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ queue.t()
    return torch.cat([l_pos, l_neg], dim=1) / tau


def infonce_loss(q: torch.Tensor, k_pos: torch.Tensor, queue: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean softmax cross-entropy of the positive key against the queue."""
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    _check_unit("q", q)
    _check_unit("k_pos", k_pos)
    _check_unit("queue", queue)
    logits = infonce_logits(q, k_pos, queue, tau)
    target = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, target)


def _tensors(x) -> list[torch.Tensor]:
    if isinstance(x, nn.Module):
        return list(x.parameters())
    if isinstance(x, torch.Tensor):
        return [x]
    return list(x)


@torch.no_grad()
def momentum_update(theta_q, theta_k, m: float):
    """In place ``theta_k <- m * theta_k + (1 - m) * theta_q``; returns ``theta_k``.

    Accepts modules, single tensors or sequences of tensors.
    """
    qs, ks = _tensors(theta_q), _tensors(theta_k)
    if len(qs) != len(ks) or any(a.shape != b.shape for a, b in zip(qs, ks)):
        raise ContractViolation("query and key parameters are not structurally identical")
    for pq, pk in zip(qs, ks):
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
    return theta_k


@torch.no_grad()
def enqueue(state: MoCoState, keys: torch.Tensor) -> MoCoState:
    """Overwrite ``B`` queue rows starting at the pointer (mod K) and advance it."""
    b = keys.shape[0]
    if b > state.K:
        raise ContractViolation(f"cannot enqueue {b} keys into a queue of size {state.K}")
    _check_unit("keys", keys)
    rows = (state.queue_ptr + torch.arange(b)) % state.K
    state.queue[rows] = keys.detach().to(state.queue.dtype)
    state.queue_ptr = (state.queue_ptr + b) % state.K
    return state


def cosine_lr(step_epoch: int, total_epochs: int, base_lr: float) -> float:
    if total_epochs <= 0:
        raise DomainError("total_epochs must be positive")
    if not 0 <= step_epoch <= total_epochs:
        raise DomainError(f"epoch {step_epoch} outside [0, {total_epochs}]")
    return 0.5 * base_lr * (1 + math.cos(math.pi * step_epoch / total_epochs))


def _views(batch, aug: AugmentConfig, rng: np.random.Generator):
    pairs = [two_view_augment(p, aug, rng) for p in batch]
    return torch.stack([a for a, _ in pairs]), torch.stack([b for _, b in pairs])


def train_step(state: MoCoState, batch, aug: AugmentConfig, lr: float) -> tuple[MoCoState, float]:
    """One MoCo update. Returns the mutated state and the loss before the step.

    Order: forward both views, loss, SGD on the query encoder, momentum update of
    the key encoder, enqueue the new keys.
    """
    if len(batch) != state.config.batch_size:
        raise ContractViolation(f"batch has {len(batch)} patches, config says {state.config.batch_size}")
    view_q, view_k = _views(batch, aug, state.rng)
    state.encoder_q.train()
    state.encoder_k.train()
    q = F.normalize(state.encoder_q(view_q), dim=1)
    with torch.no_grad():
        k = F.normalize(state.encoder_k(view_k), dim=1)
    loss = infonce_loss(q, k, state.queue, state.tau)
    if not torch.isfinite(loss):
        raise TrainingFault("non-finite InfoNCE loss", state.step)

    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    momentum_update(state.encoder_q, state.encoder_k, state.m)
    enqueue(state, k)
    state.step += 1
    return state, float(loss.detach())


@dataclass
class Stage1Result:
    state_dict: dict
    encoder_config: EncoderConfig
    loss_curve: list[float]
    best_epoch: int
    extras: dict = field(default_factory=dict)

    def encoder(self) -> Encoder:
        model = Encoder(self.encoder_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def train_moco(
    manifest: DatasetManifest,
    enc: EncoderConfig,
    cfg: Stage1Config,
    aug: AugmentConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Stage1Result:
    """Pretrain on the train split and keep the query encoder from the epoch with
    the lowest mean training loss. Validation patches are never read."""
    patches = manifest.patches("train")
    if len(patches) < cfg.batch_size:
        raise ConfigError(f"{len(patches)} train patches is fewer than batch_size={cfg.batch_size}")
    images = [p.image for p in patches]
    state = init_moco(enc, cfg)
    order_rng = np.random.default_rng([cfg.seed, 1])
    n_batches = len(images) // cfg.batch_size

    curve: list[float] = []
    best = (math.inf, -1, None)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        order = order_rng.permutation(len(images))
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            _, loss = train_step(state, [images[i] for i in idx], aug, lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        if mean_loss < best[0]:
            best = (mean_loss, epoch, copy.deepcopy(state.encoder_q.state_dict()))
        logger.info("stage1 epoch %d lr %.4g loss %.4f", epoch, lr, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return Stage1Result(best[2], enc, curve, best[1])


def fingerprint(module_or_state) -> str:
    """SHA-256 over parameter/buffer names and bytes, independent of file serialisation."""
    sd = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(sd):
        t = sd[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(result: Stage1Result, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": asdict(result.encoder_config),
        "state_dict": result.state_dict,
        "loss_curve": result.loss_curve,
        "best_epoch": result.best_epoch,
        "extras": result.extras,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> Stage1Result:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a stage-1 checkpoint")
    cfg = payload["encoder_config"]
    cfg["widths"] = tuple(cfg["widths"])
    return Stage1Result(
        payload["state_dict"], EncoderConfig(**cfg), payload["loss_curve"], payload["best_epoch"], payload["extras"]
    )


def write_loss_curve(curve: Sequence[float], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("epoch\tmean_loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i}\t{v:.8f}\n")
    return path
