from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from groupmoco.datasets import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 train + 2 validation patients per class, 4-6 patches of 16 px."""
    cfg = SyntheticConfig(
        n_patients_per_class={"train": 4, "validation": 2},
        patches_per_patient=(4, 6),
        patch_size=16,
        signal_fraction=0.5,
        seed=3,
    )
    out = tmp_path_factory.mktemp("tiny")
    return generate_synthetic(cfg, out)


def write_manifest_text(root: Path, rows, patch_size=16, make_files=True):
    """Write a manifest from ``(patient, patch_path, label, split)`` rows."""
    lines = ["# groupmoco-manifest v1", f"# patch_size={patch_size}", "patient_id\tpatch_path\tlabel\tsplit"]
    for pid, rel, label, split in rows:
        lines.append(f"{pid}\t{rel}\t{label}\t{split}")
        if make_files:
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.zeros((patch_size, patch_size, 3), np.uint8)).save(root / rel)
    path = root / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


# one line per acceptance criterion, shown in the terminal summary even when
# output capture hides the individual prints
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
