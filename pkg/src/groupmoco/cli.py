"""Command-line driver for the whole workflow.

Artifacts live under an output root (``--output``, else ``$GROUPMOCO_OUTPUT``,
else ``[run] output_dir``) in directories named by a hash of the config
sections a stage depends on, plus the run seed::

    synth/<h>/                  manifest.tsv, planted.tsv, patches
    stage1/<h>-s<seed>/         checkpoint.pt, loss_curve.tsv
    embeddings/<h>-s<seed>/     train.npy, validation.npy (+ .index.tsv)
    head/<h>-s<seed>/           head.pt, curves.tsv
    baseline/<h>-s<seed>/       baseline.pt, curves.tsv
    eval/<method>/<h>-s<seed>/  report.json, predictions.tsv, roc_*.tsv
    compare/<h>/                summary.json, table.txt, *.png

Every stage directory also gets a ``run_log.json`` (seed, config hash, wall
time, artifact digests). Exit codes: 0 ok, 1 user error, 2 internal fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import traceback
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .classifier import (
    load_baseline,
    load_head,
    save_baseline,
    save_head,
    train_baseline,
    train_head,
    write_predictions,
)
from .config import RunConfig, config_hash, load_config
from .datasets import Label, build_balanced_subset, generate_synthetic, load_manifest
from .embeddings import extract_embeddings, load_store, make_groups, save_store
from .errors import ConfigError, DependencyError, IntegrityError, UserError
from .evaluation import EvalReport, summarize_runs
from .moco import fingerprint, load_checkpoint, save_checkpoint, train_moco, write_loss_curve
from .pipeline import evaluate_baseline, evaluate_grouped, seeded

ENV_OUTPUT = "GROUPMOCO_OUTPUT"
METHODS = ("grouped", "baseline")
logger = logging.getLogger("groupmoco")


# --------------------------------------------------------------------------
# layout


class Layout:
    """Resolves every artifact path from the config alone, so a stage can name
    the upstream file it is missing."""

    def __init__(self, cfg: RunConfig, root: Path):
        self.cfg = cfg
        self.root = root

    # data ----------------------------------------------------------------
    def synth_dir(self) -> Path:
        return self.root / "synth" / config_hash(dataclasses.asdict(self.cfg.synthetic))

    def manifest_path(self) -> Path:
        return Path(self.cfg.manifest) if self.cfg.manifest else self.synth_dir() / "manifest.tsv"

    def data_id(self) -> str:
        path = require(self.manifest_path(), "groupmoco synth")
        return hashlib.sha256(path.read_bytes()).hexdigest()[:12]

    # stage hashes --------------------------------------------------------
    def stage1_hash(self) -> str:
        c = self.cfg
        return config_hash(self.data_id(), c.section_dict("augment"), c.section_dict("encoder"), c.section_dict("stage1"))

    def head_hash(self) -> str:
        c = self.cfg
        return config_hash(self.stage1_hash(), c.section_dict("grouping"), c.section_dict("head"))

    def baseline_hash(self) -> str:
        c = self.cfg
        return config_hash(self.data_id(), c.section_dict("encoder"), c.section_dict("baseline"))

    # directories ---------------------------------------------------------
    def stage1_dir(self, seed: int) -> Path:
        return self.root / "stage1" / f"{self.stage1_hash()}-s{seed}"

    def embeddings_dir(self, seed: int) -> Path:
        return self.root / "embeddings" / f"{self.stage1_hash()}-s{seed}"

    def head_dir(self, seed: int) -> Path:
        return self.root / "head" / f"{self.head_hash()}-s{seed}"

    def baseline_dir(self, seed: int) -> Path:
        return self.root / "baseline" / f"{self.baseline_hash()}-s{seed}"

    def eval_dir(self, method: str, seed: int, balanced: bool) -> Path:
        upstream = self.head_hash() if method == "grouped" else self.baseline_hash()
        h = config_hash(upstream, self.cfg.section_dict("eval"), balanced, self.cfg.balanced_per_class)
        return self.root / "eval" / method / f"{h}{'-balanced' if balanced else ''}-s{seed}"

    def compare_dir(self, seeds, balanced: bool) -> Path:
        h = config_hash(self.head_hash(), self.baseline_hash(), self.cfg.section_dict("eval"), list(seeds), balanced)
        return self.root / "compare" / h


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing upstream artifact {path} (produce it with `{producer}`)")
    return path


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_log(out: Path, command: str, seed, chash: str, started: float, artifacts, upstream=()) -> Path:
    log = {
        "command": command,
        "seed": seed,
        "config_hash": chash,
        "wall_time_s": round(time.time() - started, 3),
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "artifacts": {Path(a).name: _sha(Path(a)) for a in artifacts},
        "upstream": [str(u) for u in upstream],
    }
    path = out / "run_log.json"
    path.write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, lay: Layout, seed: int | None = None) -> Path:
    if seed is not None:
        cfg.synthetic = dataclasses.replace(cfg.synthetic, seed=seed)
    if cfg.manifest:
        logger.warning("config names an external manifest; synthetic data is written but not used")
    out = lay.synth_dir()
    started = time.time()
    manifest = generate_synthetic(cfg.synthetic, out)
    path = out / "manifest.tsv"
    write_run_log(out, "synth", cfg.synthetic.seed, out.name, started, [path, out / "planted.tsv"])
    for split, tallies in manifest.class_counts.items():
        cells = ", ".join(f"{label.name}: {t.patients} patients / {t.patches} patches" for label, t in tallies.items())
        print(f"{split:<11} {cells}")
    print(path)
    return path


def _manifest(lay: Layout):
    return load_manifest(require(lay.manifest_path(), "groupmoco synth"))


def cmd_train_stage1(cfg: RunConfig, lay: Layout, seed: int) -> Path:
    manifest = _manifest(lay)
    out = lay.stage1_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    result = train_moco(manifest, cfg.encoder, seeded(cfg.stage1, seed), cfg.augment)
    ckpt = save_checkpoint(result, out / "checkpoint.pt")
    curve = write_loss_curve(result.loss_curve, out / "loss_curve.tsv")
    write_run_log(out, "train-stage1", seed, lay.stage1_hash(), started, [ckpt, curve], [lay.manifest_path()])
    print(f"stage1 seed {seed}: best epoch {result.best_epoch} loss {min(result.loss_curve):.4f} -> {ckpt}")
    return ckpt


def cmd_extract(cfg: RunConfig, lay: Layout, seed: int) -> Path:
    manifest = _manifest(lay)
    ckpt_path = require(lay.stage1_dir(seed) / "checkpoint.pt", f"groupmoco train-stage1 --seed {seed}")
    ckpt = load_checkpoint(ckpt_path)
    before = fingerprint(ckpt.state_dict)
    out = lay.embeddings_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    files = []
    kw = dict(output_size=cfg.augment.output_size, mean=cfg.augment.mean, std=cfg.augment.std)
    for split in ("train", "validation"):
        store = extract_embeddings(ckpt, manifest, split, **kw)
        files += save_store(store, out / split)
    if fingerprint(load_checkpoint(ckpt_path).state_dict) != before:
        raise IntegrityError(f"{ckpt_path} changed during extraction")
    write_run_log(out, "extract", seed, lay.stage1_hash(), started, files, [ckpt_path])
    print(f"embeddings seed {seed}: {out}")
    return out


def _stores(lay: Layout, seed: int):
    emb = lay.embeddings_dir(seed)
    ckpt = load_checkpoint(require(lay.stage1_dir(seed) / "checkpoint.pt", f"groupmoco train-stage1 --seed {seed}"))
    fp = fingerprint(ckpt.state_dict)
    stores = []
    for split in ("train", "validation"):
        require(emb / f"{split}.npy", f"groupmoco extract --seed {seed}")
        stores.append(load_store(emb / split, expect_fingerprint=fp))
    return stores[0], stores[1], fp


def _val_policy(cfg: RunConfig, seed: int):
    return dataclasses.replace(seeded(cfg.grouping, seed), remainder="drop", shuffle_each_epoch=False)


def cmd_train_head(cfg: RunConfig, lay: Layout, seed: int) -> Path:
    train_store, val_store, fp = _stores(lay, seed)
    head_cfg = seeded(cfg.head, seed)
    head_cfg.check_policy(cfg.grouping, train_store.dim)
    policy = seeded(cfg.grouping, seed)
    out = lay.head_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    head, curves = train_head(
        lambda epoch: make_groups(train_store, policy, epoch), head_cfg, make_groups(val_store, _val_policy(cfg, seed))
    )
    ckpt = lay.stage1_dir(seed) / "checkpoint.pt"
    if fingerprint(load_checkpoint(ckpt).state_dict) != fp:
        raise IntegrityError(f"{ckpt} changed during head training")
    files = [save_head(head, head_cfg, policy, curves, out / "head.pt"), curves.write(out / "curves.tsv")]
    write_run_log(out, "train-head", seed, lay.head_hash(), started, files, [lay.embeddings_dir(seed)])
    print(f"head seed {seed}: final val patient acc {curves.val_patient_acc[-1] if curves.val_patient_acc else 'n/a'} -> {files[0]}")
    return files[0]


def cmd_train_baseline(cfg: RunConfig, lay: Layout, seed: int) -> Path:
    manifest = _manifest(lay)
    out = lay.baseline_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    bcfg = seeded(cfg.baseline, seed)
    model, curves = train_baseline(manifest, cfg.encoder, bcfg)
    files = [save_baseline(model, bcfg, curves, out / "baseline.pt"), curves.write(out / "curves.tsv")]
    write_run_log(out, "train-baseline", seed, lay.baseline_hash(), started, files, [lay.manifest_path()])
    print(f"baseline seed {seed}: final val patient acc {curves.val_patient_acc[-1] if curves.val_patient_acc else 'n/a'} -> {files[0]}")
    return files[0]


def _eval_manifest(cfg: RunConfig, lay: Layout, seed: int, balanced: bool):
    manifest = _manifest(lay)
    if not balanced:
        return manifest
    counts = manifest.class_counts["validation"]
    n = cfg.balanced_per_class or min(counts[Label.MSS].patients, counts[Label.MSI].patients)
    return build_balanced_subset(manifest, n, rng_seed=seed, split="validation")


def _write_roc(points, path: Path) -> Path:
    with path.open("w") as fh:
        fh.write("fpr\ttpr\n")
        for f, t, _ in points:
            fh.write(f"{f:.10f}\t{t:.10f}\n")
    return path


def cmd_eval(cfg: RunConfig, lay: Layout, seed: int, method: str, balanced: bool) -> Path:
    manifest = _eval_manifest(cfg, lay, seed, balanced)
    ev = cfg.eval
    out = lay.eval_dir(method, seed, balanced)
    started = time.time()
    if method == "grouped":
        head_path = require(lay.head_dir(seed) / "head.pt", f"groupmoco train-head --seed {seed}")
        head, _, _ = load_head(head_path)
        _, val_store, _ = _stores(lay, seed)
        val_store = val_store.restrict(p.patient_id for p in manifest.patients("validation"))
        report, groups, probs = evaluate_grouped(head, val_store, _val_policy(cfg, seed), manifest, "validation", ev, seed)
        rows = [("+".join(g.member_patch_ids), g.patient_id, float(p)) for g, p in zip(groups, probs)]
        upstream = [head_path, lay.embeddings_dir(seed)]
    else:
        base_path = require(lay.baseline_dir(seed) / "baseline.pt", f"groupmoco train-baseline --seed {seed}")
        model, bcfg = load_baseline(base_path)
        report, patch_probs = evaluate_baseline(model, bcfg, manifest, "validation", ev, seed)
        rows = [(p.patch_id, p.patient_id, p.p_msi) for p in patch_probs]
        upstream = [base_path]
    report.balanced = balanced
    out.mkdir(parents=True, exist_ok=True)
    files = [
        report.save(out / "report.json"),
        write_predictions(rows, out / "predictions.tsv"),
        _write_roc(report.roc_patient, out / "roc_patient.tsv"),
        _write_roc(report.roc_patch, out / "roc_patch.tsv"),
    ]
    write_run_log(out, f"eval {method}", seed, out.name.split("-")[0], started, files, upstream)
    print(
        f"{method:<8} seed {seed}{' (balanced)' if balanced else ''}: A_patient {report.A_patient:.3f}"
        f"  A_patch {report.A_patch:.3f}  AUC_patient {report.auc_patient:.3f}  AUC_patch {report.auc_patch:.3f}"
    )
    return files[0]


def _reports(lay: Layout, method: str, seeds, balanced: bool) -> list[EvalReport]:
    flag = " --balanced" if balanced else ""
    return [
        EvalReport.load(require(lay.eval_dir(method, s, balanced) / "report.json", f"groupmoco eval --method {method} --seed {s}{flag}"))
        for s in seeds
    ]


def cmd_compare(cfg: RunConfig, lay: Layout, seeds, balanced: bool, files_a=None, files_b=None) -> Path:
    if files_a or files_b:
        if not (files_a and files_b):
            raise ConfigError("--a and --b must both be given")
        reports = {
            "grouped": [EvalReport.load(require(Path(f), "groupmoco eval")) for f in files_a],
            "baseline": [EvalReport.load(require(Path(f), "groupmoco eval")) for f in files_b],
        }
        out = lay.root / "compare" / config_hash(sorted(map(str, files_a)), sorted(map(str, files_b)))
    else:
        reports = {m: _reports(lay, m, seeds, balanced) for m in METHODS}
        out = lay.compare_dir(seeds, balanced)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summary = summarize_runs(reports)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    table = summary.table()
    print(table)
    files = [out / "summary.json", out / "table.txt"]
    files[0].write_text(summary.to_json() + "\n")
    files[1].write_text(table + "\n")
    if not (files_a or files_b):
        files += make_plots(cfg, lay, summary.seeds, balanced, out)
    write_run_log(out, "compare", list(summary.seeds), out.name, started, files)
    return files[0]


# --------------------------------------------------------------------------
# plots


def _read_curves(path: Path) -> dict[str, np.ndarray]:
    lines = path.read_text().splitlines()
    cols = lines[0].split("\t")
    data = np.array([[float(x) for x in line.split("\t")] for line in lines[1:]]).reshape(-1, len(cols))
    return {c: data[:, i] for i, c in enumerate(cols)}


def make_plots(cfg: RunConfig, lay: Layout, seeds, balanced: bool, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    colors = {"grouped": "tab:blue", "baseline": "tab:orange"}
    written = []
    for level in ("patient", "patch"):
        fig, ax = plt.subplots(figsize=(5, 5))
        for method in METHODS:
            for i, report in enumerate(_reports(lay, method, seeds, balanced)):
                pts = np.array([(f, t) for f, t, _ in getattr(report, f"roc_{level}")])
                auc = getattr(report, f"auc_{level}")
                label = f"{method} (seed {report.run_seed}, AUC {auc:.2f})" if len(seeds) <= 3 or i == 0 else None
                ax.plot(pts[:, 0], pts[:, 1], color=colors[method], alpha=0.35 + 0.65 / len(seeds), label=label)
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set(xlabel="false positive rate", ylabel="true positive rate", title=f"{level}-level ROC")
        ax.legend(loc="lower right", fontsize=7)
        fig.tight_layout()
        written.append(out / f"roc_{level}.png")
        fig.savefig(written[-1], dpi=120)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for method, where, name in (("grouped", lay.head_dir, "curves.tsv"), ("baseline", lay.baseline_dir, "curves.tsv")):
        runs = [_read_curves(require(where(s) / name, f"groupmoco train-{'head' if method == 'grouped' else 'baseline'}")) for s in seeds]
        acc = np.array([r["val_patient_acc"] for r in runs])
        epochs = np.arange(1, acc.shape[1] + 1)
        mean = np.nanmean(acc, axis=0)
        ax.plot(epochs, mean, color=colors[method], label=f"{method} (mean of {len(seeds)})")
        if len(seeds) > 1:
            sd = np.nanstd(acc, axis=0, ddof=1)
            ax.fill_between(epochs, mean - sd, mean + sd, color=colors[method], alpha=0.2)
    ax.set(xlabel="epoch", ylabel="validation patient accuracy", ylim=(0, 1.02))
    ax.legend(fontsize=8)
    fig.tight_layout()
    written.append(out / "accuracy_curves.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for s in seeds:
        c = _read_curves(require(lay.stage1_dir(s) / "loss_curve.tsv", f"groupmoco train-stage1 --seed {s}"))
        ax.plot(c["epoch"] + 1, c["mean_loss"], label=f"seed {s}")
    ax.set(xlabel="epoch", ylabel="mean InfoNCE loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    written.append(out / "stage1_loss.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written


def cmd_plot(cfg: RunConfig, lay: Layout, seeds, balanced: bool) -> list[Path]:
    out = lay.root / "plots" / lay.compare_dir(seeds, balanced).name
    out.mkdir(parents=True, exist_ok=True)
    files = make_plots(cfg, lay, seeds, balanced, out)
    for f in files:
        print(f)
    return files


# --------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groupmoco", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, seeds=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="INI run config")
        p.add_argument("-o", "--output", help=f"output root (overrides ${ENV_OUTPUT} and [run] output_dir)")
        if seeds:
            p.add_argument("--seed", type=int, help="run only this seed instead of every seed in [run] seeds")
        return p

    p = add("synth", "generate the synthetic dataset", seeds=False)
    p.add_argument("--seed", type=int, help="override [synthetic] seed")
    add("train-stage1", "momentum-contrast pretraining")
    add("extract", "embed train and validation patches with the frozen encoder")
    add("train-head", "train the group-level head on concatenated embeddings")
    add("train-baseline", "train the per-patch supervised baseline")
    p = add("eval", "evaluate on the validation split")
    p.add_argument("--method", choices=(*METHODS, "both"), default="both")
    p.add_argument("--balanced", action="store_true", help="evaluate on a class- and patch-balanced subset")
    p.add_argument("--aggregation", choices=("mean_prob", "majority_vote"), help="override [eval] aggregation")
    p = add("compare", "mean ± std table, paired t-tests and plots")
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--a", nargs="+", metavar="REPORT", help="explicit grouped report files")
    p.add_argument("--b", nargs="+", metavar="REPORT", help="explicit baseline report files")
    p = add("plot", "ROC overlays and accuracy-vs-epoch curves")
    p.add_argument("--balanced", action="store_true")
    p = add("pipeline", "every stage for every seed, then compare")
    p.add_argument("--balanced", action="store_true", help="also run the balanced evaluation")
    return parser


def _output_root(cfg: RunConfig, args) -> Path:
    if args.output:
        return Path(args.output)
    if os.environ.get(ENV_OUTPUT):
        return Path(os.environ[ENV_OUTPUT])
    root = Path(cfg.output_dir)
    if not root.is_absolute() and cfg.source is not None:
        root = cfg.source.parent / root
    return root


def run(args) -> None:
    cfg = load_config(args.config)
    if getattr(args, "aggregation", None):
        cfg.eval = dataclasses.replace(cfg.eval, aggregation=args.aggregation)
    lay = Layout(cfg, _output_root(cfg, args))
    cmd = args.command
    if cmd == "synth":
        cmd_synth(cfg, lay, args.seed)
        return
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    if cmd == "train-stage1":
        for s in seeds:
            cmd_train_stage1(cfg, lay, s)
    elif cmd == "extract":
        for s in seeds:
            cmd_extract(cfg, lay, s)
    elif cmd == "train-head":
        for s in seeds:
            cmd_train_head(cfg, lay, s)
    elif cmd == "train-baseline":
        for s in seeds:
            cmd_train_baseline(cfg, lay, s)
    elif cmd == "eval":
        methods = METHODS if args.method == "both" else (args.method,)
        for s in seeds:
            for m in methods:
                cmd_eval(cfg, lay, s, m, args.balanced)
    elif cmd == "compare":
        cmd_compare(cfg, lay, seeds, args.balanced, args.a, args.b)
    elif cmd == "plot":
        cmd_plot(cfg, lay, seeds, args.balanced)
    elif cmd == "pipeline":
        if not cfg.manifest and not lay.manifest_path().exists():
            cmd_synth(cfg, lay)
        for s in seeds:
            cmd_train_stage1(cfg, lay, s)
            cmd_extract(cfg, lay, s)
            cmd_train_head(cfg, lay, s)
            cmd_train_baseline(cfg, lay, s)
            for balanced in (False, True) if args.balanced else (False,):
                for m in METHODS:
                    cmd_eval(cfg, lay, s, m, balanced)
        for balanced in (False, True) if args.balanced else (False,):
            cmd_compare(cfg, lay, seeds, balanced)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        run(args)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
