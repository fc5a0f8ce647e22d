"""Frozen-encoder embedding extraction, the on-disk embedding store, and
per-patient grouping of embeddings into concatenated vectors.

Store layout for a prefix ``p``:

* ``p.npy``        float32 matrix, one row per patch
* ``p.index.tsv``  ``# groupmoco-embeddings v1`` header, ``# dim=``/``# encoder=``
                   metadata lines, then ``row  patch_id  patient_id  label``
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .augment import IMAGENET_MEAN, IMAGENET_STD, eval_transform
from .datasets import DatasetManifest, Label
from .errors import ConfigError, IntegrityError, ParseError
from .moco import Encoder, Stage1Result, fingerprint, load_checkpoint

logger = logging.getLogger(__name__)

STORE_VERSION = "groupmoco-embeddings v1"
REMAINDER_POLICIES = ("drop", "pad_resample")


@dataclass(frozen=True)
class PatientEmbeddings:
    label: Label
    patch_ids: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.patch_ids):
            raise IntegrityError(f"{self.matrix.shape[0]} rows for {len(self.patch_ids)} patches")


@dataclass(frozen=True)
class EmbeddingStore:
    dim: int
    records: dict[str, PatientEmbeddings]
    encoder_fingerprint: str

    def __post_init__(self):
        for pid, rec in self.records.items():
            if rec.matrix.ndim != 2 or rec.matrix.shape[1] != self.dim:
                raise IntegrityError(f"patient {pid}: embeddings have shape {rec.matrix.shape}, store dim is {self.dim}")

    def __len__(self):
        return len(self.records)

    @property
    def n_patches(self) -> int:
        return sum(len(r.patch_ids) for r in self.records.values())

    def restrict(self, patient_ids) -> "EmbeddingStore":
        keep = set(patient_ids)
        return EmbeddingStore(
            self.dim, {k: v for k, v in self.records.items() if k in keep}, self.encoder_fingerprint
        )


def _as_result(checkpoint) -> Stage1Result:
    if isinstance(checkpoint, Stage1Result):
        return checkpoint
    return load_checkpoint(checkpoint)


@torch.no_grad()
def embed_images(backbone: torch.nn.Module, images, output_size: int, mean, std, batch_size: int = 256) -> np.ndarray:
    backbone.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.stack([eval_transform(im, output_size, mean, std) for im in images[start : start + batch_size]])
        out.append(backbone(x).numpy().astype(np.float32))
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def extract_embeddings(
    checkpoint,
    manifest: DatasetManifest,
    split: str | None,
    output_size: int | None = None,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    batch_size: int = 256,
) -> EmbeddingStore:
    """Embed every patch of ``split`` with the frozen stage-1 backbone.

    ``checkpoint`` is a :class:`Stage1Result` or a checkpoint path. The
    projection head is not used. Raises :class:`IntegrityError` if the
    backbone output width disagrees with the checkpoint's ``output_dim`` or if
    the weights change during extraction.
    """
    result = _as_result(checkpoint)
    encoder = Encoder(result.encoder_config)
    try:
        encoder.load_state_dict(result.state_dict)
    except RuntimeError as exc:
        raise IntegrityError(f"checkpoint weights do not fit the declared encoder: {exc}") from None
    for p in encoder.parameters():
        p.requires_grad_(False)
    before = fingerprint(encoder)
    output_size = output_size or manifest.patch_size
    n_o = result.encoder_config.output_dim

    records = {}
    for patient in manifest.patients(split):
        images = [p.image for p in patient.patches]
        emb = embed_images(encoder.backbone, images, output_size, mean, std, batch_size)
        if emb.shape[1] != n_o:
            raise IntegrityError(f"backbone emits {emb.shape[1]}-d features, checkpoint declares {n_o}")
        records[patient.patient_id] = PatientEmbeddings(
            patient.label, tuple(p.patch_id for p in patient.patches), emb
        )
    if fingerprint(encoder) != before:
        raise IntegrityError("encoder weights changed during extraction")
    return EmbeddingStore(n_o, records, fingerprint(result.state_dict))


def save_store(store: EmbeddingStore, prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    matrix_path = prefix.with_name(prefix.name + ".npy")
    index_path = prefix.with_name(prefix.name + ".index.tsv")
    mats = [rec.matrix for rec in store.records.values()]
    full = np.concatenate(mats).astype(np.float32) if mats else np.zeros((0, store.dim), np.float32)
    np.save(matrix_path, full)
    with index_path.open("w") as fh:
        fh.write(f"# {STORE_VERSION}\n# dim={store.dim}\n# encoder={store.encoder_fingerprint}\n")
        fh.write("row\tpatch_id\tpatient_id\tlabel\n")
        row = 0
        for pid, rec in store.records.items():
            for patch_id in rec.patch_ids:
                fh.write(f"{row}\t{patch_id}\t{pid}\t{rec.label.name}\n")
                row += 1
    return matrix_path, index_path


def load_store(prefix: str | Path, mmap: bool = True, expect_fingerprint: str | None = None) -> EmbeddingStore:
    prefix = Path(prefix)
    matrix_path = prefix.with_name(prefix.name + ".npy")
    index_path = prefix.with_name(prefix.name + ".index.tsv")
    meta = {}
    rows: dict[str, list] = {}
    labels: dict[str, Label] = {}
    with index_path.open() as fh:
        first = fh.readline().strip()
        if first != f"# {STORE_VERSION}":
            raise ParseError(f"{index_path}: unsupported store version line {first!r}")
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
                continue
            if line.startswith("row\t"):
                continue
            row, patch_id, pid, label = line.rstrip("\n").split("\t")
            rows.setdefault(pid, []).append((int(row), patch_id))
            labels[pid] = Label.parse(label)
    matrix = np.load(matrix_path, mmap_mode="r" if mmap else None)
    dim = int(meta["dim"])
    if matrix.ndim != 2 or matrix.shape[1] != dim:
        raise IntegrityError(f"{matrix_path}: shape {matrix.shape} does not match dim={dim}")
    fp = meta.get("encoder", "")
    if expect_fingerprint is not None and fp != expect_fingerprint:
        raise IntegrityError(f"{index_path}: produced by encoder {fp[:12]}, expected {expect_fingerprint[:12]}")
    records = {}
    for pid, entries in rows.items():
        idx = [r for r, _ in entries]
        start, stop = idx[0], idx[-1] + 1
        if idx != list(range(start, stop)):
            raise IntegrityError(f"patient {pid}: rows are not contiguous")
        records[pid] = PatientEmbeddings(labels[pid], tuple(p for _, p in entries), matrix[start:stop])
    return EmbeddingStore(dim, records, fp)


# --------------------------------------------------------------------------
# grouping


@dataclass(frozen=True)
class GroupingPolicy:
    n_g: int = 4
    remainder: str = "pad_resample"
    shuffle_each_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_g < 1:
            raise ConfigError(f"group size must be >= 1, got {self.n_g}")
        if self.remainder not in REMAINDER_POLICIES:
            raise ConfigError(f"remainder must be one of {REMAINDER_POLICIES}")


@dataclass(frozen=True)
class GroupSample:
    vector: np.ndarray
    label: Label
    patient_id: str
    member_patch_ids: tuple[str, ...]


def _patient_rng(policy: GroupingPolicy, epoch: int, patient_id: str) -> np.random.Generator:
    return np.random.default_rng([policy.seed, epoch, zlib.crc32(patient_id.encode())])


def group_indices(n: int, policy: GroupingPolicy, rng: np.random.Generator) -> list[np.ndarray]:
    """Index tuples for one patient with ``n`` patches."""
    n_g = policy.n_g
    order = rng.permutation(n) if policy.shuffle_each_epoch else np.arange(n)
    n_full, rest = divmod(n, n_g)
    groups = [order[i * n_g : (i + 1) * n_g] for i in range(n_full)]
    if rest and policy.remainder == "pad_resample":
        tail = order[n_full * n_g :]
        need = n_g - rest
        others = order[: n_full * n_g]
        if len(others) >= need:
            fill = rng.choice(others, need, replace=False)
        else:
            fill = rng.choice(order, need, replace=True)
        groups.append(np.concatenate([tail, fill]))
    return groups


def iter_groups(store: EmbeddingStore, policy: GroupingPolicy, epoch: int = 0) -> Iterator[GroupSample]:
    for pid, rec in store.records.items():
        n = len(rec.patch_ids)
        if n < policy.n_g and policy.remainder == "drop":
            logger.warning("patient %s has %d patches < n_g=%d; skipped", pid, n, policy.n_g)
            continue
        for idx in group_indices(n, policy, _patient_rng(policy, epoch, pid)):
            yield GroupSample(
                np.asarray(rec.matrix[idx], dtype=np.float32).reshape(-1),
                rec.label,
                pid,
                tuple(rec.patch_ids[i] for i in idx),
            )


def make_groups(store: EmbeddingStore, policy: GroupingPolicy, epoch: int = 0) -> list[GroupSample]:
    """Shuffle (if enabled), chunk into ``n_g``-tuples and concatenate, per patient.

    Every vector has length ``n_g * store.dim``; groups never mix patients.
    """
    return list(iter_groups(store, policy, epoch))


def stack_groups(groups) -> tuple[np.ndarray, np.ndarray]:
    if not groups:
        return np.zeros((0, 0), np.float32), np.zeros(0, np.int64)
    X = np.stack([g.vector for g in groups]).astype(np.float32)
    y = np.array([int(g.label) for g in groups], dtype=np.int64)
    return X, y
