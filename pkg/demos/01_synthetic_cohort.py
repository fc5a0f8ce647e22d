"""Generate a small synthetic cohort and look at what the planted signal is.

Writes PNG patches and a manifest under ./demo-out/cohort, prints the per-split
tallies, and saves a contact sheet with textured MSI patches on the top row
and unmarked patches (MSS, plus the untextured majority of MSI) below.

    python demos/01_synthetic_cohort.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from groupmoco.datasets import Label, SyntheticConfig, generate_synthetic, read_planted

out = Path("demo-out/cohort")
cfg = SyntheticConfig(n_patients_per_class={"train": 4, "validation": 2}, patches_per_patient=(10, 10))
manifest = generate_synthetic(cfg, out)

for split, tallies in manifest.class_counts.items():
    print(split, {label.name: (t.patients, t.patches) for label, t in tallies.items()})

# MSI patients carry round(0.3 * 10) = 3 textured patches each
planted = read_planted(out / "planted.tsv")
patches = manifest.patches("train")
textured = [p for p in patches if planted[p.patch_id]]
plain = [p for p in patches if not planted[p.patch_id]]
print(f"{len(textured)} textured of {sum(p.label is Label.MSI for p in patches)} MSI train patches")

rows = [textured[:8], plain[:8]]
sheet = np.concatenate([np.concatenate([p.image for p in row], axis=1) for row in rows], axis=0)
Image.fromarray(sheet).resize((sheet.shape[1] * 4, sheet.shape[0] * 4), Image.NEAREST).save(out / "contact_sheet.png")
print("contact sheet:", out / "contact_sheet.png")
