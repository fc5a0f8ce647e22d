"""In-process orchestration of one run of each method (used by the CLI and the
end-to-end tests)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .augment import AugmentConfig
from .classifier import (
    BaselineConfig,
    HeadConfig,
    aggregate_patients,
    patch_predictions_from_groups,
    predict_groups,
    predict_patches,
    train_baseline,
    train_head,
)
from .datasets import DatasetManifest
from .embeddings import EmbeddingStore, GroupingPolicy, extract_embeddings, make_groups
from .evaluation import EvalReport, evaluate
from .moco import EncoderConfig, Stage1Config, Stage1Result, fingerprint, train_moco

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    t: float = 0.5
    aggregation: str = "mean_prob"
    # "groups": patient score is the mean over its group probabilities;
    # "patches": groups are first extrapolated to patches
    patient_scores_from: str = "groups"


def _labels(manifest: DatasetManifest, split: str):
    patients = manifest.patients(split)
    return (
        {p.patch_id: p.label for pt in patients for p in pt.patches},
        {pt.patient_id: pt.label for pt in patients},
    )


def evaluate_grouped(
    head,
    store: EmbeddingStore,
    policy: GroupingPolicy,
    manifest: DatasetManifest,
    split: str,
    ev: EvalConfig,
    run_seed: int,
) -> tuple[EvalReport, list, np.ndarray]:
    groups = make_groups(store, policy, epoch=0)
    probs = predict_groups(head, groups)
    patch_probs = patch_predictions_from_groups(groups, probs)
    if ev.patient_scores_from == "groups":
        units = [(g.patient_id, p) for g, p in zip(groups, probs)]
    else:
        units = [(pp.patient_id, pp.p_msi) for pp in patch_probs]
    patients = aggregate_patients(units, ev.t, ev.aggregation)
    patch_labels, patient_labels = _labels(manifest, split)
    group_acc = float(np.mean([(p >= ev.t) == int(g.label) for g, p in zip(groups, probs)]))
    report = evaluate(patch_probs, patients, patch_labels, patient_labels, run_seed, ev.t, "grouped", group_acc)
    return report, groups, probs


def evaluate_baseline(model, cfg: BaselineConfig, manifest: DatasetManifest, split: str, ev: EvalConfig, run_seed: int):
    patch_probs = predict_patches(model, manifest, split, cfg)
    patients = aggregate_patients([(p.patient_id, p.p_msi) for p in patch_probs], ev.t, ev.aggregation)
    patch_labels, patient_labels = _labels(manifest, split)
    report = evaluate(patch_probs, patients, patch_labels, patient_labels, run_seed, ev.t, "baseline")
    return report, patch_probs


def seeded(cfg, seed: int):
    return replace(cfg, seed=seed)


@dataclass
class GroupedRun:
    stage1: Stage1Result
    train_store: EmbeddingStore
    val_store: EmbeddingStore
    head: object
    curves: object
    report: EvalReport
    encoder_hashes: tuple[str, str, str]


def run_grouped(
    manifest: DatasetManifest,
    enc: EncoderConfig,
    stage1: Stage1Config,
    aug: AugmentConfig,
    policy: GroupingPolicy,
    head_cfg: HeadConfig,
    ev: EvalConfig,
    seed: int,
    eval_manifest: DatasetManifest | None = None,
) -> GroupedRun:
    """Stage 1 + extraction + stage 2 + evaluation on the validation split."""
    eval_manifest = eval_manifest or manifest
    s1 = train_moco(manifest, enc, seeded(stage1, seed), aug)
    h0 = fingerprint(s1.state_dict)
    kw = dict(output_size=aug.output_size, mean=aug.mean, std=aug.std)
    train_store = extract_embeddings(s1, manifest, "train", **kw)
    val_store = extract_embeddings(s1, eval_manifest, "validation", **kw)
    h1 = fingerprint(s1.state_dict)
    head_cfg = seeded(head_cfg, seed)
    head_cfg.check_policy(policy, train_store.dim)
    train_policy = seeded(policy, seed)
    val_policy = replace(train_policy, remainder="drop", shuffle_each_epoch=False)
    head, curves = train_head(
        lambda epoch: make_groups(train_store, train_policy, epoch),
        head_cfg,
        make_groups(val_store, val_policy, 0),
    )
    h2 = fingerprint(s1.state_dict)
    report, _, _ = evaluate_grouped(head, val_store, val_policy, eval_manifest, "validation", ev, seed)
    return GroupedRun(s1, train_store, val_store, head, curves, report, (h0, h1, h2))


def run_baseline(
    manifest: DatasetManifest,
    enc: EncoderConfig,
    cfg: BaselineConfig,
    ev: EvalConfig,
    seed: int,
    eval_manifest: DatasetManifest | None = None,
):
    eval_manifest = eval_manifest or manifest
    cfg = seeded(cfg, seed)
    model, curves = train_baseline(manifest, enc, cfg)
    report, _ = evaluate_baseline(model, cfg, eval_manifest, "validation", ev, seed)
    return model, curves, report
