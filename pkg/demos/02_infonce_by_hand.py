"""InfoNCE on a case small enough to do on paper, then one real MoCo step.

With B=1, q = k+, a queue of two vectors orthogonal to q and tau = 1 the
logits are (1, 0, 0), so the loss is -ln(e / (e + 2)) = ln(1 + 2/e).

    python demos/02_infonce_by_hand.py
"""

import math

import numpy as np
import torch

from groupmoco.augment import AugmentConfig
from groupmoco.datasets import SyntheticConfig, generate_synthetic
from groupmoco.moco import EncoderConfig, Stage1Config, infonce_logits, infonce_loss, init_moco, train_step

q = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
queue = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
print("logits:", infonce_logits(q, q, queue, 1.0).tolist())
print(f"loss  : {infonce_loss(q, q, queue, 1.0).item():.6f}  (by hand {math.log(1 + 2 / math.e):.6f})")

# lowering tau sharpens the softmax, so the same geometry costs far less
for tau in (1.0, 0.5, 0.2, 0.07):
    print(f"tau={tau:<5} loss={infonce_loss(q, q, queue, tau).item():.6f}")

# training steps: forward, loss, SGD on the query encoder, momentum update, enqueue.
# The first step scores low because the queue still holds random vectors, not keys.
manifest = generate_synthetic(
    SyntheticConfig(n_patients_per_class={"train": 2}, patches_per_patient=(4, 4), patch_size=16), "demo-out/tiny"
)
enc = EncoderConfig(backbone="tiny_conv", widths=(8, 16), output_dim=16, projection_dim=8)
state = init_moco(enc, Stage1Config(K=8, batch_size=4, m=0.99, epochs=1))
aug = AugmentConfig(output_size=16, crop_scale=(0.5, 1.0), jitter_strength=0.0, mean=(0.5,) * 3, std=(0.5,) * 3)
images = [p.image for p in manifest.patches("train")][:4]
for step in range(3):
    _, loss = train_step(state, images, aug, lr=0.05)
    print(f"step {step}: loss {loss:.4f}, queue pointer {state.queue_ptr}, ln(K+1) = {np.log(9):.4f}")
