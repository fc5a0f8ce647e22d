import math
import shutil

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from groupmoco.augment import AugmentConfig
from groupmoco.datasets import load_manifest
from groupmoco.errors import ConfigError, ContractViolation, DomainError, TrainingFault
from groupmoco.moco import (
    Encoder,
    EncoderConfig,
    Stage1Config,
    cosine_lr,
    enqueue,
    fingerprint,
    infonce_loss,
    init_moco,
    load_checkpoint,
    momentum_update,
    save_checkpoint,
    train_moco,
    train_step,
    write_loss_curve,
)

TINY_ENC = EncoderConfig(backbone="tiny_conv", output_dim=16, projection_dim=8, widths=(8, 16))
TINY_AUG = AugmentConfig(output_size=16, mean=(0.5,) * 3, std=(0.5,) * 3)


def tiny_cfg(**kw):
    return Stage1Config(**{**dict(K=8, m=0.9, tau=0.2, batch_size=4, epochs=2, base_lr=0.05), **kw})


def brute_force_infonce(q, k, queue, tau):
    """Softmax cross-entropy written out with explicit loops in float64."""
    q, k, queue = (np.asarray(a, dtype=np.float64) for a in (q, k, queue))
    total = 0.0
    for b in range(len(q)):
        logits = [float(np.dot(q[b], k[b])) / tau] + [float(np.dot(q[b], row)) / tau for row in queue]
        top = max(logits)
        log_z = top + math.log(sum(math.exp(l - top) for l in logits))
        total += log_z - logits[0]
    return total / len(q)


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# --- init ----------------------------------------------------------------


def test_init_copies_and_normalises():
    st = init_moco(TINY_ENC, tiny_cfg(), seed=1)
    for pq, pk in zip(st.encoder_q.parameters(), st.encoder_k.parameters()):
        assert torch.equal(pq, pk)
        assert not pk.requires_grad
    assert torch.allclose(st.queue.norm(dim=1), torch.ones(8), atol=1e-5)
    assert st.queue_ptr == 0


def test_init_deterministic():
    a = init_moco(TINY_ENC, tiny_cfg(), seed=5)
    b = init_moco(TINY_ENC, tiny_cfg(), seed=5)
    assert fingerprint(a.encoder_q) == fingerprint(b.encoder_q)
    assert torch.equal(a.queue, b.queue)


def test_queue_size_must_divide_batch():
    with pytest.raises(ConfigError):
        Stage1Config(K=10, batch_size=4)


# --- InfoNCE -------------------------------------------------------------


def test_infonce_hand_cases():
    q = torch.tensor([[1.0, 0.0, 0.0]])
    queue2 = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert infonce_loss(q, q, queue2, 1.0).item() == pytest.approx(-math.log(math.e / (math.e + 2)), rel=1e-6)
    assert infonce_loss(q, q, queue2, 0.5).item() == pytest.approx(-math.log(math.e**2 / (math.e**2 + 2)), rel=1e-6)
    assert infonce_loss(q, q, queue2, 1.0).item() == pytest.approx(0.5514, abs=1e-4)
    assert infonce_loss(q, q, queue2, 0.5).item() == pytest.approx(0.2395, abs=1e-4)

    q4 = torch.tensor([[1.0, 0, 0, 0, 0]])
    k4 = torch.tensor([[0, 1.0, 0, 0, 0]])
    queue3 = torch.eye(5)[2:]
    assert infonce_loss(q4, k4, queue3, 1.0).item() == pytest.approx(math.log(4), rel=1e-6)


def test_infonce_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        B, K, d = rng.integers(1, 5), rng.integers(1, 17), rng.integers(2, 9)
        q, k, queue = unit(rng, B, d), unit(rng, B, d), unit(rng, K, d)
        tau = float(rng.uniform(0.05, 2.0))
        got = infonce_loss(*(torch.tensor(a) for a in (q, k, queue)), tau).item()
        want = brute_force_infonce(q, k, queue, tau)
        assert abs(got - want) <= 1e-6 * abs(want)


def test_infonce_bounds_for_tau_at_least_one():
    rng = np.random.default_rng(1)
    for _ in range(200):
        K, d = int(rng.integers(1, 16)), int(rng.integers(2, 8))
        tau = float(rng.uniform(1, 5))
        q, k, queue = (torch.tensor(unit(rng, *s)) for s in ((3, d), (3, d), (K, d)))
        loss = infonce_loss(q, k, queue, tau).item()
        assert 0 < loss <= math.log(1 + K * math.exp(2 / tau)) + 1e-12
        # with the positive logit at least as large as every negative, ln(K+1) caps the loss
        best = torch.maximum(k, k)
        for b in range(3):
            if (q[b] @ queue.T).max() > q[b] @ k[b]:
                best[b] = q[b]
        assert infonce_loss(q, best, queue, tau).item() <= math.log(K + 1) + 1e-12


def test_infonce_uniform_logits_hit_ln_k_plus_one():
    eye = torch.eye(5, dtype=torch.float64)
    assert infonce_loss(eye[:1], eye[1:2], eye[2:], 1.0).item() == pytest.approx(math.log(4), abs=1e-12)


def test_infonce_exceeds_ln_k_plus_one_when_positive_is_worst():
    # q.k = -1 while every queue row has q.k = +1: loss = ln(1 + K e^2) > ln(K + 1)
    q = torch.tensor([[1.0, 0.0]])
    queue = q.repeat(3, 1)
    loss = infonce_loss(q, -q, queue, 1.0).item()
    assert loss == pytest.approx(math.log(1 + 3 * math.e**2), rel=1e-6)
    assert loss > math.log(4)


def test_infonce_errors():
    q = torch.tensor([[1.0, 0.0]])
    with pytest.raises(DomainError):
        infonce_loss(q, q, q, 0.0)
    with pytest.raises(ContractViolation):
        infonce_loss(torch.tensor([[2.0, 0.0]]), q, q, 0.2)


def test_infonce_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(backbone="tiny_conv", output_dim=6, projection_dim=4, widths=(4, 4))).double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    rng = np.random.default_rng(0)
    k = torch.tensor(unit(rng, 2, 4))
    queue = torch.tensor(unit(rng, 5, 4))

    def loss_fn():
        return infonce_loss(F.normalize(enc(x), dim=1), k, queue, 0.2)

    enc.zero_grad()
    loss_fn().backward()
    params = list(enc.parameters())
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()

    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    offset = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                numeric[offset + i] = (up - down) / (2 * eps)
            offset += flat.numel()
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel <= 1e-4


# --- momentum and queue --------------------------------------------------


def test_momentum_update_cases():
    k = torch.tensor([1.0, 2.0])
    q = torch.tensor([3.0, 5.0])
    assert torch.equal(momentum_update(q, k.clone(), 1.0), k)
    assert torch.equal(momentum_update(q, k.clone(), 0.0), q)
    out = momentum_update(torch.tensor([0.0]), torch.tensor([1.0]), 0.999)
    assert out.item() == pytest.approx(0.999)
    assert torch.equal(q, torch.tensor([3.0, 5.0]))
    with pytest.raises(ContractViolation):
        momentum_update(torch.zeros(3), torch.zeros(2), 0.5)


def _reference_ring(K, B, steps):
    """Expected (writes per row, pointer) from a plain-Python ring buffer."""
    writes = [[] for _ in range(K)]
    ptr = 0
    for s in range(steps):
        for b in range(B):
            writes[(ptr + b) % K].append((s, b))
        ptr = (ptr + B) % K
    return writes, ptr


@pytest.mark.parametrize("K", [4, 8])
@pytest.mark.parametrize("B", [1, 2, 4])
def test_enqueue_exhaustive(K, B):
    d = 3
    for start in range(K):
        for steps in range(1, 2 * K // B + 2):
            st = init_moco(TINY_ENC, tiny_cfg(K=8, batch_size=4), seed=0)
            st.queue = F.normalize(torch.randn(K, d), dim=1)
            st.queue_ptr = start
            initial = st.queue.clone()
            tags = {}
            for s in range(steps):
                keys = F.normalize(torch.randn(B, d), dim=1)
                for b in range(B):
                    tags[(s, b)] = keys[b]
                enqueue(st, keys)
            writes, _ = _reference_ring(K, B, steps)
            # shift the reference by the starting pointer
            for row in range(K):
                hist = writes[(row - start) % K]
                expected = tags[hist[-1]] if hist else initial[row]
                assert torch.equal(st.queue[row], expected)
            assert st.queue_ptr == (start + steps * B) % K


def test_enqueue_examples():
    st = init_moco(TINY_ENC, tiny_cfg(), seed=0)
    st.queue = F.normalize(torch.randn(4, 8), dim=1)
    keys = F.normalize(torch.randn(2, 8), dim=1)
    before = st.queue.clone()
    enqueue(st, keys)
    assert torch.equal(st.queue[:2], keys) and torch.equal(st.queue[2:], before[2:]) and st.queue_ptr == 2

    st.queue_ptr = 3
    enqueue(st, keys)
    assert torch.equal(st.queue[3], keys[0]) and torch.equal(st.queue[0], keys[1]) and st.queue_ptr == 1

    with pytest.raises(ContractViolation):
        enqueue(st, F.normalize(torch.randn(5, 8), dim=1))


def test_full_cycle_replaces_every_row_once():
    st = init_moco(TINY_ENC, tiny_cfg(K=8, batch_size=2), seed=0)
    seen = torch.zeros(8, dtype=torch.long)
    for _ in range(4):
        rows = (st.queue_ptr + torch.arange(2)) % 8
        seen[rows] += 1
        enqueue(st, F.normalize(torch.randn(2, 8), dim=1))
    assert seen.tolist() == [1] * 8 and st.queue_ptr == 0


# --- schedule ------------------------------------------------------------


def test_cosine_lr():
    assert cosine_lr(0, 10, 0.3) == pytest.approx(0.3)
    assert cosine_lr(10, 10, 0.3) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(5, 10, 0.3) == pytest.approx(0.15)
    with pytest.raises(DomainError):
        cosine_lr(0, 0, 0.3)
    with pytest.raises(DomainError):
        cosine_lr(11, 10, 0.3)


# --- training ------------------------------------------------------------


def _images(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, (size, size, 3), dtype=np.uint8) for _ in range(n)]


def test_train_step_update_order_and_queue():
    st = init_moco(TINY_ENC, tiny_cfg(), seed=0)
    imgs = _images(4)
    for step in range(5):
        k_before = [p.clone() for p in st.encoder_k.parameters()]
        ptr = st.queue_ptr
        st, loss = train_step(st, imgs, TINY_AUG, 0.05)
        assert math.isfinite(loss)
        for pk_old, pq, pk in zip(k_before, st.encoder_q.parameters(), st.encoder_k.parameters()):
            expected = st.m * pk_old + (1 - st.m) * pq.detach()
            assert (pk - expected).abs().max().item() <= 1e-6
        assert st.queue_ptr == (ptr + 4) % 8
        assert torch.allclose(st.queue.norm(dim=1), torch.ones(8), atol=1e-5)
        assert st.step == step + 1


def test_train_step_batch_size_contract():
    st = init_moco(TINY_ENC, tiny_cfg(), seed=0)
    with pytest.raises(ContractViolation):
        train_step(st, _images(3), TINY_AUG, 0.05)


def test_train_step_nan_is_a_training_fault():
    st = init_moco(TINY_ENC, tiny_cfg(), seed=0)
    st.step = 7
    with torch.no_grad():
        for p in st.encoder_q.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingFault, match="step 7"):
        train_step(st, _images(4), TINY_AUG, 0.05)


def test_key_encoder_trajectory_reconstruction():
    st = init_moco(TINY_ENC, tiny_cfg(m=0.95), seed=0)
    imgs = _images(4)
    theta_k = [p.detach().clone() for p in st.encoder_k.parameters()]
    for _ in range(50):
        train_step(st, imgs, TINY_AUG, 0.05)
        logged_q = [p.detach().clone() for p in st.encoder_q.parameters()]
        theta_k = [0.95 * k + 0.05 * q for k, q in zip(theta_k, logged_q)]
    err = max((a - b).abs().max().item() for a, b in zip(theta_k, st.encoder_k.parameters()))
    assert err <= 1e-6


def test_train_moco_curve_and_checkpoint(tiny_dataset, tmp_path):
    cfg = tiny_cfg(epochs=3, batch_size=4, K=8)
    res = train_moco(tiny_dataset, TINY_ENC, cfg, TINY_AUG)
    assert len(res.loss_curve) == 3
    assert res.best_epoch == int(np.argmin(res.loss_curve))

    again = train_moco(tiny_dataset, TINY_ENC, cfg, TINY_AUG)
    assert again.loss_curve == res.loss_curve

    path = save_checkpoint(res, tmp_path / "ck.pt")
    loaded = load_checkpoint(path)
    assert loaded.encoder_config == TINY_ENC
    assert loaded.loss_curve == res.loss_curve and loaded.best_epoch == res.best_epoch
    assert fingerprint(loaded.state_dict) == fingerprint(res.state_dict)

    text = write_loss_curve(res.loss_curve, tmp_path / "curve.txt").read_text().splitlines()
    assert text[0] == "epoch\tmean_loss" and len(text) == 4


def test_train_moco_never_reads_validation(tiny_dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset.root, root)
    for patient in tiny_dataset.patients("validation"):
        shutil.rmtree(root / patient.patient_id)
    m = load_manifest(root / "manifest.tsv", verify_files=False)
    res = train_moco(m, TINY_ENC, tiny_cfg(epochs=1), TINY_AUG)
    assert len(res.loss_curve) == 1


def test_train_moco_too_few_patches(tiny_dataset):
    with pytest.raises(ConfigError):
        train_moco(tiny_dataset, TINY_ENC, tiny_cfg(batch_size=64, K=64), TINY_AUG)


def test_resnet18_backbone_shapes():
    enc = Encoder(EncoderConfig(backbone="resnet18"))
    enc.eval()
    with torch.no_grad():
        x = torch.randn(2, 3, 32, 32)
        assert enc.features(x).shape == (2, 512)
        assert enc(x).shape == (2, 128)
