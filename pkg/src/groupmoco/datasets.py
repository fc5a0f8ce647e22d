"""Patient/patch datasets: manifest I/O, label inheritance, balanced subsets and
a synthetic generator with a planted texture signal.

Manifest format (tab separated, ``#`` lines are metadata)::

    # groupmoco-manifest v1
    # patch_size=224
    patient_id	patch_path	label	split
    TCGA-A6-1	TCGA-A6-1/p000.png	MSI	train

Patch paths are relative to the manifest's directory and the patch id is the
file stem.
"""

from __future__ import annotations

import csv
import enum
import itertools
import logging
import math
from bisect import bisect_left
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import CapacityError, ConfigError, ConsistencyError, FormatError, IngestError, ParseError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "groupmoco-manifest v1"
MANIFEST_COLUMNS = ("patient_id", "patch_path", "label", "split")
SPLITS = ("train", "validation")


class Label(enum.IntEnum):
    """Patient-level target. MSI is the positive class (index 1) everywhere."""

    MSS = 0
    MSI = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().upper()
        # MSIMUT is the folder name used by the public TCGA tile release
        if key in ("MSI", "MSIMUT", "MSI-H"):
            return cls.MSI
        if key == "MSS":
            return cls.MSS
        raise ParseError(f"unknown label {text!r} (expected MSS or MSI)")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    patient_id: str
    path: Path
    label: Label
    patch_size: int

    @property
    def image(self) -> np.ndarray:
        """The raster as a ``(H, W, 3)`` uint8 array (read from disk on access)."""
        return read_patch(self.path, self.patch_size)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: Label
    split: str
    patches: tuple[PatchRecord, ...]

    def __post_init__(self):
        if not self.patches:
            raise ConsistencyError(f"patient {self.patient_id} has no patches")


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    patch_path: str
    label: Label
    split: str

    @property
    def patch_id(self) -> str:
        return Path(self.patch_path).stem


@dataclass(frozen=True)
class ClassTally:
    patches: int = 0
    patients: int = 0


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    patch_size: int
    root: Path = field(default_factory=Path)

    @cached_property
    def class_counts(self) -> dict[str, dict[Label, ClassTally]]:
        patches: Counter = Counter()
        patients: dict[tuple[str, Label], set] = defaultdict(set)
        for e in self.entries:
            patches[e.split, e.label] += 1
            patients[e.split, e.label].add(e.patient_id)
        return {
            split: {
                label: ClassTally(patches[split, label], len(patients[split, label]))
                for label in Label
            }
            for split in SPLITS
        }

    def patients(self, split: str | None = None) -> list[PatientRecord]:
        """Patients in order of first appearance, optionally filtered by split."""
        grouped: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            if split is None or e.split == split:
                grouped.setdefault(e.patient_id, []).append(e)
        out = []
        for pid, rows in grouped.items():
            patches = tuple(
                PatchRecord(r.patch_id, pid, self.root / r.patch_path, r.label, self.patch_size)
                for r in rows
            )
            out.append(PatientRecord(pid, rows[0].label, rows[0].split, patches))
        return out

    def patches(self, split: str | None = None) -> list[PatchRecord]:
        return [p for patient in self.patients(split) for p in patient.patches]

    def restrict(self, patient_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(patient_ids)
        return DatasetManifest(
            tuple(e for e in self.entries if e.patient_id in keep), self.patch_size, self.root
        )


def _check_consistency(entries: Sequence[ManifestEntry]) -> None:
    split_of: dict[str, str] = {}
    label_of: dict[str, Label] = {}
    seen_patches: set[str] = set()
    for e in entries:
        if e.split not in SPLITS:
            raise ParseError(f"unknown split {e.split!r} for patient {e.patient_id}")
        if split_of.setdefault(e.patient_id, e.split) != e.split:
            raise ConsistencyError(
                f"patient {e.patient_id} listed in both {split_of[e.patient_id]!r} and {e.split!r}"
            )
        if label_of.setdefault(e.patient_id, e.label) != e.label:
            raise ConsistencyError(f"patient {e.patient_id} has conflicting labels")
        if e.patch_id in seen_patches:
            raise ConsistencyError(f"duplicate patch id {e.patch_id!r}")
        seen_patches.add(e.patch_id)


def load_manifest(path: str | Path, verify_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest.

    ``verify_files`` checks that every referenced raster exists; it can be
    turned off to inspect a manifest whose images live elsewhere.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"manifest not found: {path}")
    patch_size = None
    rows = []
    with path.open(newline="") as fh:
        header = None
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key.strip() == "patch_size":
                    patch_size = int(value)
                continue
            if not line.strip():
                continue
            cells = next(csv.reader([line.rstrip("\r\n")], delimiter="\t"))
            if header is None:
                header = tuple(c.strip() for c in cells)
                if header != MANIFEST_COLUMNS:
                    raise ParseError(f"{path}: bad header {header!r}")
                continue
            if len(cells) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 columns, got {len(cells)}")
            pid, patch_path, label, split = (c.strip() for c in cells)
            rows.append(ManifestEntry(pid, patch_path, Label.parse(label), split))
    if patch_size is None:
        raise ParseError(f"{path}: missing '# patch_size=' line")
    _check_consistency(rows)
    root = path.parent
    if verify_files:
        for e in rows:
            if not (root / e.patch_path).is_file():
                raise IngestError(f"patch file not found: {root / e.patch_path}")
    return DatasetManifest(tuple(rows), patch_size, root)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# {MANIFEST_VERSION}\n# patch_size={manifest.patch_size}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow((e.patient_id, e.patch_path, e.label.name, e.split))
    return path


def read_patch(path: Path, patch_size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected a 3-channel RGB raster, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    if patch_size is not None and arr.shape[:2] != (patch_size, patch_size):
        raise FormatError(f"{path}: raster is {arr.shape[1]}x{arr.shape[0]}, manifest says {patch_size}")
    return arr


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for a tiled WSI cohort.

    MSI patients carry ``round(signal_fraction * n)`` patches overlaid with a
    diagonal stripe texture; everything else is shared between classes.
    """

    n_patients_per_class: dict = field(default_factory=lambda: {"train": 20, "validation": 10})
    patches_per_patient: tuple[int, int] = (32, 32)
    patch_size: int = 32
    signal_fraction: float = 0.3
    noise_level: float = 0.08
    texture_amplitude: float = 0.25
    texture_period: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size < 16:
            raise ConfigError(f"patch_size must be >= 16, got {self.patch_size}")
        lo, hi = self.patches_per_patient
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad patches_per_patient range {self.patches_per_patient}")
        for split, n in self.n_patients_per_class.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
            if n < 1:
                raise ConfigError(f"n_patients_per_class[{split}] must be positive")
        if not 0 < self.signal_fraction <= 1:
            raise ConfigError("signal_fraction must lie in (0, 1]")
        if self.noise_level < 0 or self.texture_amplitude < 0:
            raise ConfigError("noise_level and texture_amplitude must be >= 0")


def n_textured(signal_fraction: float, n_patches: int) -> int:
    """Number of planted patches for an MSI patient (round half up)."""
    return int(math.floor(signal_fraction * n_patches + 0.5))


def stripe_texture(size: int, period: float, phase: float) -> np.ndarray:
    """Unit-amplitude sinusoid along the main diagonal, shape ``(size, size)``."""
    yy, xx = np.mgrid[0:size, 0:size]
    return np.sin(2 * np.pi * (xx + yy) / (period * math.sqrt(2)) + phase)


def _tissue(rng: np.random.Generator, size: int, stain: np.ndarray) -> np.ndarray:
    """Stroma background with scattered, possibly clumped, elliptical nuclei.

    Density, nucleus size, elongation, orientation, darkness and clumping are
    drawn per patch so that patches differ in ways that survive cropping and
    colour jitter.
    """
    grid = int(rng.integers(2, 9))
    coarse = rng.random((grid, grid))
    field_img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    shade = np.asarray(field_img, dtype=np.float64)[..., None] / 255.0
    img = stain * (0.8 + 0.4 * shade)

    density = math.exp(rng.uniform(math.log(0.01), math.log(0.08)))
    radius = rng.uniform(0.8, 3.0)
    elongation = rng.uniform(1.0, 2.5)
    angle = rng.uniform(0, np.pi)
    darkness = rng.uniform(0.3, 0.95)
    n_cells = rng.poisson(density * size * size)
    if n_cells:
        if rng.random() < 0.5:
            centres = rng.uniform(0, size, (n_cells, 2))
        else:
            seeds = rng.uniform(0, size, (int(rng.integers(1, 5)), 2))
            spread = rng.uniform(2.0, size / 4)
            centres = seeds[rng.integers(0, len(seeds), n_cells)] + rng.normal(0, spread, (n_cells, 2))
        radii = radius * rng.lognormal(0.0, 0.2, n_cells)
        angles = angle + rng.normal(0, 0.3, n_cells)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dy = yy[None] - centres[:, 0, None, None]
        dx = xx[None] - centres[:, 1, None, None]
        cos, sin = np.cos(angles)[:, None, None], np.sin(angles)[:, None, None]
        u = (dx * cos + dy * sin) / elongation
        v = -dx * sin + dy * cos
        cover = np.clip(np.exp(-(u**2 + v**2) / (2 * radii[:, None, None] ** 2)).sum(0), 0, 1)[..., None]
        nuclei = np.array([0.30, 0.18, 0.50])
        img = img * (1 - darkness * cover) + nuclei * darkness * cover
    return img


def render_patch(
    rng: np.random.Generator, cfg: SyntheticConfig, stain: np.ndarray, textured: bool
) -> np.ndarray:
    img = _tissue(rng, cfg.patch_size, stain)
    if textured:
        amp = cfg.texture_amplitude * rng.uniform(0.75, 1.25)
        stripes = stripe_texture(cfg.patch_size, cfg.texture_period, rng.uniform(0, 2 * np.pi))
        img = img + amp * stripes[..., None]
    img = img + cfg.noise_level * rng.standard_normal(img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic(config: SyntheticConfig, out_dir: str | Path) -> DatasetManifest:
    """Write PNG rasters under ``out_dir/<patient_id>/`` plus ``manifest.tsv``.

    A sidecar ``planted.tsv`` records which patches carry the texture. Output
    is a pure function of ``config``.
    """
    config.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestError(f"cannot create output directory {out_dir}: {exc}") from exc

    entries: list[ManifestEntry] = []
    planted: list[tuple[str, int]] = []
    lo, hi = config.patches_per_patient
    patient_index = 0
    for split in SPLITS:
        n_per_class = config.n_patients_per_class.get(split, 0)
        for label in Label:
            for i in range(n_per_class):
                rng = np.random.default_rng([config.seed, patient_index])
                patient_index += 1
                pid = f"{split[:3]}-{label.name.lower()}-{i:03d}"
                n = int(rng.integers(lo, hi + 1))
                marked = np.zeros(n, dtype=bool)
                if label is Label.MSI:
                    marked[rng.permutation(n)[: n_textured(config.signal_fraction, n)]] = True
                stain = np.array([0.85, 0.55, 0.72]) + rng.normal(0, 0.05, 3)
                (out_dir / pid).mkdir(exist_ok=True)
                for j in range(n):
                    patch_id = f"{pid}-{j:03d}"
                    rel = f"{pid}/{patch_id}.png"
                    img = render_patch(rng, config, stain, bool(marked[j]))
                    Image.fromarray(img, mode="RGB").save(out_dir / rel, format="PNG")
                    entries.append(ManifestEntry(pid, rel, label, split))
                    planted.append((patch_id, int(marked[j])))

    manifest = DatasetManifest(tuple(entries), config.patch_size, out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    with (out_dir / "planted.tsv").open("w") as fh:
        fh.write("patch_id\ttextured\n")
        fh.writelines(f"{pid}\t{flag}\n" for pid, flag in planted)
    return manifest


def read_planted(path: str | Path) -> dict[str, bool]:
    with Path(path).open() as fh:
        next(fh)
        return {pid: flag == "1" for pid, flag in (line.rstrip("\n").split("\t") for line in fh)}


# --------------------------------------------------------------------------
# balanced subsets

_EXACT_LIMIT = 50_000


def _subset_sums(counts: Sequence[int], k: int) -> dict[int, tuple[int, ...]]:
    """Map each reachable sum of a k-subset to its lexicographically first subset."""
    best: dict[int, tuple[int, ...]] = {}
    for combo in itertools.combinations(range(len(counts)), k):
        best.setdefault(sum(counts[i] for i in combo), combo)
    return best


def _exact_pick(a: Sequence[int], b: Sequence[int], k: int):
    sums_a = _subset_sums(a, k)
    sums_b = _subset_sums(b, k)
    keys_b = sorted(sums_b)
    best = None
    for s, combo_a in sums_a.items():
        pos = bisect_left(keys_b, s)
        for j in (pos - 1, pos):
            if 0 <= j < len(keys_b):
                cand = (abs(s - keys_b[j]), combo_a, sums_b[keys_b[j]])
                if best is None or cand < best:
                    best = cand
    return best[1], best[2]


def _local_search(a: Sequence[int], b: Sequence[int], k: int, rng: np.random.Generator, restarts: int = 8):
    a = np.asarray(a)
    b = np.asarray(b)
    best = None
    for r in range(restarts):
        if r == 0:
            # start from the k largest of each class
            sel_a = set(np.argsort(-a, kind="stable")[:k].tolist())
            sel_b = set(np.argsort(-b, kind="stable")[:k].tolist())
        else:
            sel_a = set(rng.choice(len(a), k, replace=False).tolist())
            sel_b = set(rng.choice(len(b), k, replace=False).tolist())
        gap = int(a[list(sel_a)].sum() - b[list(sel_b)].sum())
        improved = True
        while improved and gap != 0:
            improved = False
            # best single swap in either class
            move = None
            for sel, counts, sign in ((sel_a, a, 1), (sel_b, b, -1)):
                outside = [i for i in range(len(counts)) if i not in sel]
                for i in sorted(sel):
                    for j in outside:
                        new_gap = gap + sign * int(counts[j] - counts[i])
                        if abs(new_gap) < abs(gap) and (move is None or abs(new_gap) < abs(move[0])):
                            move = (new_gap, sel, i, j)
            if move is not None:
                gap, sel, i, j = move
                sel.remove(i)
                sel.add(j)
                improved = True
        cand = (abs(gap), tuple(sorted(sel_a)), tuple(sorted(sel_b)))
        if best is None or cand < best:
            best = cand
    return best[1], best[2]


def build_balanced_subset(
    manifest: DatasetManifest, n_per_class: int, rng_seed: int = 0, split: str = "validation"
) -> DatasetManifest:
    """Pick ``n_per_class`` patients per class from ``split`` with matched patch totals.

    The selection minimises the absolute difference of total patch counts.
    Pools small enough to enumerate are solved exactly, with ties going to the
    lexicographically first choice over patients sorted by id; larger pools use
    swap-based local search with ``rng_seed``-driven restarts.
    """
    pools = {label: [] for label in Label}
    for patient in manifest.patients(split):
        pools[patient.label].append(patient)
    for label in Label:
        if len(pools[label]) < n_per_class:
            raise CapacityError(
                f"need {n_per_class} {label.name} patients in {split!r}, "
                f"available: MSS={len(pools[Label.MSS])}, MSI={len(pools[Label.MSI])}"
            )
        pools[label].sort(key=lambda p: p.patient_id)
    counts = {label: [len(p.patches) for p in pools[label]] for label in Label}

    n_combos = max(math.comb(len(pools[label]), n_per_class) for label in Label)
    if n_combos <= _EXACT_LIMIT:
        pick_mss, pick_msi = _exact_pick(counts[Label.MSS], counts[Label.MSI], n_per_class)
    else:
        pick_mss, pick_msi = _local_search(
            counts[Label.MSS], counts[Label.MSI], n_per_class, np.random.default_rng(rng_seed)
        )
    chosen = [pools[Label.MSS][i].patient_id for i in pick_mss]
    chosen += [pools[Label.MSI][i].patient_id for i in pick_msi]
    return manifest.restrict(chosen)
