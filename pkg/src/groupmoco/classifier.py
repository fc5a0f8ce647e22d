"""Stage-2 group head, patient-level aggregation, and the per-patch baseline."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import IMAGENET_MEAN, IMAGENET_STD, eval_transform
from .datasets import DatasetManifest, Label
from .embeddings import GroupingPolicy, GroupSample, stack_groups
from .errors import ConfigError, ContractViolation, DomainError, IntegrityError
from .moco import EncoderConfig, build_backbone

HEAD_FORMAT = "groupmoco-head v1"
BASELINE_FORMAT = "groupmoco-baseline v1"
AGGREGATIONS = ("mean_prob", "majority_vote")


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int = 2048
    hidden_dims: tuple[int, ...] = (512, 128)
    dropout: float = 0.25
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def check_policy(self, policy: GroupingPolicy, n_o: int) -> None:
        if self.input_dim != policy.n_g * n_o:
            raise ConfigError(
                f"head input_dim={self.input_dim} but n_g*n_o = {policy.n_g}*{n_o} = {policy.n_g * n_o}"
            )


@dataclass(frozen=True)
class PatchProbability:
    patch_id: str
    patient_id: str
    p_msi: float


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    P_W: float
    C_W: Label
    t: float
    method: str = "mean_prob"


class GroupHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        layers: list[nn.Module] = []
        d = cfg.input_dim
        for h in cfg.hidden_dims:
            layers += [nn.Linear(d, h), nn.ReLU(inplace=True), nn.Dropout(cfg.dropout)]
            d = h
        layers.append(nn.Linear(d, 2))
        self.net = nn.Sequential(*layers)
        self.input_dim = cfg.input_dim
        # fixed input standardisation, fitted on training vectors
        self.register_buffer("in_mean", torch.zeros(cfg.input_dim))
        self.register_buffer("in_scale", torch.ones(cfg.input_dim))

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]

    @torch.no_grad()
    def fit_standardizer(self, X: torch.Tensor, eps: float = 1e-6) -> None:
        self.in_mean.copy_(X.mean(dim=0))
        self.in_scale.copy_(X.std(dim=0, unbiased=False).clamp_min(eps))

    def forward(self, x):
        return self.net((x - self.in_mean) / self.in_scale)


# --------------------------------------------------------------------------
# aggregation


def patient_probability(probs: Iterable[float]) -> float:
    """Mean of the unit probabilities, summed exactly and rounded once.

    The result is the float nearest the true mean, so it does not depend on
    input order and a constant list returns that constant.
    """
    probs = [float(p) for p in probs]
    if not probs:
        raise DomainError("patient has no scored units")
    if any(not 0.0 <= p <= 1.0 for p in probs):
        raise DomainError("probabilities must lie in [0, 1]")
    return float(sum(map(Fraction, probs), Fraction(0)) / len(probs))


def classify_patient(P_W: float, t: float = 0.5) -> Label:
    return Label.MSI if P_W >= t else Label.MSS


def majority_vote(labels: Iterable[Label]) -> Label:
    """Modal label; a tie goes to MSI."""
    counts = Counter(Label(l) for l in labels)
    if not counts:
        raise DomainError("majority vote over an empty list")
    return Label.MSI if counts[Label.MSI] >= counts[Label.MSS] else Label.MSS


def aggregate_patients(
    units: Iterable[tuple[str, float]], t: float = 0.5, method: str = "mean_prob"
) -> list[PatientPrediction]:
    """Turn ``(patient_id, p_msi)`` pairs into one prediction per patient.

    Under ``majority_vote`` the reported ``P_W`` is the fraction of MSI votes.
    """
    if method not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
    by_patient: dict[str, list[float]] = {}
    for pid, p in units:
        by_patient.setdefault(pid, []).append(float(p))
    out = []
    for pid, probs in by_patient.items():
        if method == "mean_prob":
            P_W = patient_probability(probs)
            out.append(PatientPrediction(pid, P_W, classify_patient(P_W, t), t, method))
        else:
            votes = [classify_patient(p, t) for p in probs]
            out.append(PatientPrediction(pid, patient_probability([float(v) for v in votes]), majority_vote(votes), t, method))
    return out


def patch_predictions_from_groups(
    groups: Sequence[GroupSample], probs: Sequence[float]
) -> list[PatchProbability]:
    """Each member patch inherits its group's probability, averaged over repeats."""
    acc: dict[str, list] = {}
    for g, p in zip(groups, probs, strict=True):
        for patch_id in g.member_patch_ids:
            acc.setdefault(patch_id, [g.patient_id, []])[1].append(float(p))
    return [PatchProbability(pid, owner, math.fsum(ps) / len(ps)) for pid, (owner, ps) in acc.items()]


# --------------------------------------------------------------------------
# stage-2 head


@dataclass
class TrainingCurves:
    """Per-epoch accuracies; validation entries are ``None`` without validation data."""

    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float | None] = field(default_factory=list)
    val_patient_acc: list[float | None] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("epoch\ttrain_loss\ttrain_acc\tval_acc\tval_patient_acc\n")
            for i in range(len(self.train_acc)):
                cells = [self.train_loss[i], self.train_acc[i], self.val_acc[i], self.val_patient_acc[i]]
                fh.write(f"{i}\t" + "\t".join("nan" if c is None else f"{c:.6f}" for c in cells) + "\n")
        return path


@torch.no_grad()
def _probs(model: nn.Module, X: np.ndarray | torch.Tensor, batch_size: int = 1024) -> np.ndarray:
    model.eval()
    X = torch.as_tensor(X, dtype=torch.float32)
    out = [F.softmax(model(X[i : i + batch_size]), dim=1)[:, 1] for i in range(0, len(X), batch_size)]
    return torch.cat(out).numpy().astype(np.float64) if out else np.zeros(0)


def _accuracy(p: np.ndarray, y: np.ndarray, t: float = 0.5) -> float:
    return float(np.mean((p >= t).astype(np.int64) == y)) if len(y) else float("nan")


def _patient_acc(patient_ids, probs, labels: dict, t: float = 0.5) -> float:
    preds = aggregate_patients(zip(patient_ids, probs), t)
    return float(np.mean([p.C_W == labels[p.patient_id] for p in preds]))


def train_head(
    train_groups: Sequence[GroupSample] | Callable[[int], Sequence[GroupSample]],
    cfg: HeadConfig,
    val_groups: Sequence[GroupSample] | None = None,
) -> tuple[GroupHead, TrainingCurves]:
    """Fit the MLP head with cross-entropy on group labels.

    ``train_groups`` may be a callable ``epoch -> groups`` so that groups are
    redrawn every epoch.
    """
    torch.manual_seed(cfg.seed)
    head = GroupHead(cfg)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    draw = train_groups if callable(train_groups) else (lambda epoch: train_groups)

    Xv = yv = None
    if val_groups:
        Xv, yv = stack_groups(val_groups)
        _check_dim(head, Xv)
        val_pids = [g.patient_id for g in val_groups]
        val_labels = {g.patient_id: g.label for g in val_groups}

    curves = TrainingCurves()
    if cfg.standardize:
        X0, _ = stack_groups(draw(0))
        if len(X0):
            _check_dim(head, X0)
            head.fit_standardizer(torch.from_numpy(X0))
    for epoch in range(cfg.epochs):
        X, y = stack_groups(draw(epoch))
        _check_dim(head, X)
        X, y = torch.from_numpy(X), torch.from_numpy(y)
        head.train()
        perm = torch.randperm(len(X), generator=gen)
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = F.cross_entropy(head(X[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curves.train_loss.append(total / max(len(X), 1))
        curves.train_acc.append(_accuracy(_probs(head, X), y.numpy()))
        if Xv is not None:
            pv = _probs(head, Xv)
            curves.val_acc.append(_accuracy(pv, yv))
            curves.val_patient_acc.append(_patient_acc(val_pids, pv, val_labels))
        else:
            curves.val_acc.append(None)
            curves.val_patient_acc.append(None)
    head.eval()
    return head, curves


def _check_dim(model: GroupHead, X: np.ndarray) -> None:
    if len(X) and X.shape[1] != model.input_dim:
        raise ContractViolation(f"group vectors have length {X.shape[1]}, head expects {model.input_dim}")


def predict_groups(head: GroupHead, groups: Sequence[GroupSample]) -> np.ndarray:
    """Positive-class softmax probability per group, aligned with ``groups``."""
    X, _ = stack_groups(groups)
    _check_dim(head, X)
    return _probs(head, X)


def save_head(head: GroupHead, cfg: HeadConfig, policy: GroupingPolicy, curves: TrainingCurves, path) -> Path:
    payload = {
        "format": HEAD_FORMAT,
        "head_config": asdict(cfg),
        "grouping_policy": asdict(policy),
        "state_dict": head.state_dict(),
        "curves": asdict(curves),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())
    return Path(path)


def load_head(path) -> tuple[GroupHead, HeadConfig, GroupingPolicy]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != HEAD_FORMAT:
        raise IntegrityError(f"{path}: not a head checkpoint")
    hc = payload["head_config"]
    hc["hidden_dims"] = tuple(hc["hidden_dims"])
    cfg = HeadConfig(**hc)
    head = GroupHead(cfg)
    head.load_state_dict(payload["state_dict"])
    head.eval()
    return head, cfg, GroupingPolicy(**payload["grouping_policy"])


# --------------------------------------------------------------------------
# per-patch baseline


@dataclass(frozen=True)
class BaselineConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    output_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    flips: bool = True
    seed: int = 0


class PatchClassifier(nn.Module):
    """Backbone of the stage-1 family with a 2-way linear layer, trained end to end."""

    def __init__(self, enc: EncoderConfig):
        super().__init__()
        self.config = enc
        self.backbone = build_backbone(enc)
        self.fc = nn.Linear(enc.output_dim, 2)

    def forward(self, x):
        return self.fc(self.backbone(x))


def _patch_tensors(patches, cfg: BaselineConfig) -> torch.Tensor:
    return torch.stack([eval_transform(p.image, cfg.output_size, cfg.mean, cfg.std) for p in patches])


def train_baseline(
    manifest: DatasetManifest, enc: EncoderConfig, cfg: BaselineConfig, val_split: str | None = "validation"
) -> tuple[PatchClassifier, TrainingCurves]:
    """Supervised patch classifier on inherited labels, random init.

    Training input is the evaluation transform plus random horizontal/vertical
    flips. Validation curves are computed when ``val_split`` has patches.
    """
    patches = manifest.patches("train")
    if not patches:
        raise ConfigError("no train patches")
    X = _patch_tensors(patches, cfg)
    y = torch.tensor([int(p.label) for p in patches])
    val = manifest.patches(val_split) if val_split else []
    Xv = _patch_tensors(val, cfg) if val else None
    yv = np.array([int(p.label) for p in val])
    val_labels = {p.patient_id: p.label for p in val}

    torch.manual_seed(cfg.seed)
    model = PatchClassifier(enc)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    curves = TrainingCurves()
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(X), generator=gen)
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = X[idx]
            if cfg.flips:
                hmask = torch.rand(len(idx), generator=gen) < 0.5
                vmask = torch.rand(len(idx), generator=gen) < 0.5
                xb = torch.where(hmask.view(-1, 1, 1, 1), xb.flip(-1), xb)
                xb = torch.where(vmask.view(-1, 1, 1, 1), xb.flip(-2), xb)
            loss = F.cross_entropy(model(xb), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curves.train_loss.append(total / len(X))
        curves.train_acc.append(_accuracy(_probs(model, X, 256), y.numpy()))
        if Xv is not None:
            pv = _probs(model, Xv, 256)
            curves.val_acc.append(_accuracy(pv, yv))
            curves.val_patient_acc.append(_patient_acc([p.patient_id for p in val], pv, val_labels))
        else:
            curves.val_acc.append(None)
            curves.val_patient_acc.append(None)
    model.eval()
    return model, curves


def predict_patches(model: PatchClassifier, manifest: DatasetManifest, split: str | None, cfg: BaselineConfig) -> list[PatchProbability]:
    patches = manifest.patches(split)
    if not patches:
        return []
    probs = _probs(model, _patch_tensors(patches, cfg), 256)
    return [PatchProbability(p.patch_id, p.patient_id, float(q)) for p, q in zip(patches, probs)]


def save_baseline(model: PatchClassifier, cfg: BaselineConfig, curves: TrainingCurves, path) -> Path:
    payload = {
        "format": BASELINE_FORMAT,
        "encoder_config": asdict(model.config),
        "baseline_config": asdict(cfg),
        "state_dict": model.state_dict(),
        "curves": asdict(curves),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())
    return Path(path)


def load_baseline(path) -> tuple[PatchClassifier, BaselineConfig]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != BASELINE_FORMAT:
        raise IntegrityError(f"{path}: not a baseline checkpoint")
    ec = payload["encoder_config"]
    ec["widths"] = tuple(ec["widths"])
    model = PatchClassifier(EncoderConfig(**ec))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    bc = payload["baseline_config"]
    bc["mean"], bc["std"] = tuple(bc["mean"]), tuple(bc["std"])
    return model, BaselineConfig(**bc)


def write_predictions(rows: Iterable[tuple[str, str, float]], path) -> Path:
    """Line-oriented ``unit_id  patient_id  p_msi`` table."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write("unit_id\tpatient_id\tp_msi\n")
        for unit, pid, p in rows:
            fh.write(f"{unit}\t{pid}\t{p:.10f}\n")
    return path


def read_predictions(path) -> list[tuple[str, str, float]]:
    with Path(path).open() as fh:
        next(fh)
        return [(u, pid, float(p)) for u, pid, p in (line.rstrip("\n").split("\t") for line in fh)]
