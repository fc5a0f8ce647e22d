"""From per-patch embeddings to patient decisions.

Builds a toy embedding store, forms groups of n_g patches per patient (each
group vector has length n_g * n_o), and shows how group probabilities become a
patient probability P_W and a label under the mean and majority-vote rules.

    python demos/03_groups_and_patients.py
"""

import numpy as np

from groupmoco.classifier import aggregate_patients, patch_predictions_from_groups
from groupmoco.datasets import Label
from groupmoco.embeddings import EmbeddingStore, GroupingPolicy, PatientEmbeddings, make_groups

rng = np.random.default_rng(0)
n_o = 3
store = EmbeddingStore(
    n_o,
    {
        "A": PatientEmbeddings(Label.MSI, tuple(f"A{i}" for i in range(6)), rng.standard_normal((6, n_o))),
        "B": PatientEmbeddings(Label.MSS, tuple(f"B{i}" for i in range(4)), rng.standard_normal((4, n_o))),
    },
    "toy",
)

for remainder in ("drop", "pad_resample"):
    groups = make_groups(store, GroupingPolicy(n_g=4, remainder=remainder))
    print(f"{remainder}: " + ", ".join(f"{g.patient_id}{list(g.member_patch_ids)}" for g in groups))
print("group vector length:", groups[0].vector.shape[0], "= n_g * n_o =", 4 * n_o)

# pretend a head scored the groups
probs = [0.8, 0.45, 0.2]
for method in ("mean_prob", "majority_vote"):
    for p in aggregate_patients([(g.patient_id, pr) for g, pr in zip(groups, probs)], t=0.5, method=method):
        print(f"{method:<14} patient {p.patient_id}: P_W = {p.P_W:.3f} -> {p.C_W.name}")

# the same probabilities pushed down to patches; a patch used by two groups gets their average
for pp in patch_predictions_from_groups(groups, probs)[:6]:
    print(f"  {pp.patch_id}: {pp.p_msi:.3f}")
