import math

import numpy as np
import pytest
import torch
from helpers import central_diff, grad_rel_err, rel_err
from hypothesis import given
from hypothesis import strategies as st
from oracles import ntxent_oracle

from mgm.backbone import EncoderConfig, build_multitask, make_tasks
from mgm.selfsup import (
    AugmentationPolicy,
    ProjectionHead,
    ReconDecoder,
    augment,
    contrastive_loss,
    embed,
    nt_xent,
    pair_map,
    recon_loss,
    reconstruction_mse,
    sample_views,
)
from mgm.synthdata import load_split


def _images(b=4, res=16, seed=0):
    return torch.rand((b, res, res, 3), generator=torch.Generator().manual_seed(seed)) * 2 - 1


# ------------------------------------------------------------ NT-Xent


@given(st.floats(0.05, 5.0), st.integers(0, 10 ** 6))
def test_single_pair_is_zero(tau, seed):
    z = torch.randn(2, 5, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    assert abs(nt_xent(z, tau=tau).item()) < 1e-12


@pytest.mark.parametrize("tau", [0.1, 0.5, 2.0])
def test_identical_embeddings_give_ln3(tau):
    z = torch.ones(4, 8, dtype=torch.float64)
    assert abs(nt_xent(z, tau=tau).item() - math.log(3)) <= 1e-6


def test_matches_oracle_on_random_batches():
    r = np.random.default_rng(0)
    for trial in range(100):
        n = int(r.integers(1, 5))
        z = r.normal(size=(2 * n, 6))
        tau = float(r.uniform(0.2, 1.5)) if trial % 2 else 0.5
        got = nt_xent(torch.from_numpy(z), tau=tau).item()
        want = ntxent_oracle(z, pair_map(n).numpy(), tau)
        assert rel_err(got, want) <= 1e-5 or abs(want) < 1e-12


@given(st.integers(1, 6), st.integers(0, 10 ** 6), st.floats(0.05, 2.0))
def test_nonnegative(n, seed, tau):
    z = torch.randn(2 * n, 4, generator=torch.Generator().manual_seed(seed))
    assert nt_xent(z, tau=tau).item() >= -1e-6


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_permutation_invariance(n, seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(2 * n, 4, generator=g, dtype=torch.float64)
    partner = pair_map(n)
    perm = torch.randperm(2 * n, generator=g)
    inv = torch.argsort(perm)
    # element perm[k] moves to slot k; its partner moves to slot inv[partner[perm[k]]]
    partner_perm = inv[partner[perm]]
    a = nt_xent(z, partner)
    b = nt_xent(z[perm], partner_perm)
    assert abs(a.item() - b.item()) < 1e-10


def test_invalid_batches():
    with pytest.raises(ValueError):
        nt_xent(torch.zeros(0, 4))
    with pytest.raises(ValueError):
        nt_xent(torch.randn(3, 4))
    with pytest.raises(ValueError):
        nt_xent(torch.randn(4, 4), partner=torch.tensor([1, 2, 3, 0]))


@pytest.mark.parametrize("dtype,eps,tol", [(torch.float32, 1e-2, 1e-3), (torch.float64, 1e-6, 1e-5)])
def test_gradient_matches_finite_differences(dtype, eps, tol):
    z = torch.randn(6, 5, dtype=dtype, generator=torch.Generator().manual_seed(3)).requires_grad_(True)
    nt_xent(z).backward()
    with torch.no_grad():
        numeric = central_diff(lambda: nt_xent(z), z, eps)
    assert grad_rel_err(z.grad, numeric) <= tol


# -------------------------------------------------------- augmentation


def test_identity_policy_views_equal_input():
    x = _images()
    xa, xb = sample_views(x, AugmentationPolicy.identity(), np.random.default_rng(0))
    assert torch.equal(xa, x) and torch.equal(xb, x)


def test_views_reproducible_and_independent():
    x = _images()
    p = AugmentationPolicy()
    a1, b1 = sample_views(x, p, np.random.default_rng(5))
    a2, b2 = sample_views(x, p, np.random.default_rng(5))
    assert torch.equal(a1, a2) and torch.equal(b1, b2)
    assert not torch.equal(a1, b1)


def test_view_range_over_many_draws():
    x = _images(8)
    x[0] = 1.0
    x[1] = -1.0
    rng = np.random.default_rng(0)
    strong = AugmentationPolicy(crop_scale=(0.2, 1.0), flip_prob=0.5, jitter=0.9, blur_prob=0.5)
    for _ in range(125):  # 1000 augmented images
        v = augment(x, strong, rng)
        assert v.shape == x.shape
        assert v.min() >= -1.0 and v.max() <= 1.0


def test_policy_validation():
    for bad in ({"crop_scale": (0.0, 1.0)}, {"crop_scale": (0.8, 0.5)}, {"flip_prob": 1.5}, {"jitter": 1.0}):
        with pytest.raises(ValueError):
            AugmentationPolicy(**bad)


# -------------------------------------------------------- embeddings


def _model():
    torch.manual_seed(0)
    M = build_multitask(EncoderConfig((4, 8), 1, 8), make_tasks(["seg"]))
    return M, ProjectionHead(8, 16, 6)


def test_embeddings_unit_norm_and_deterministic():
    M, head = _model()
    M.eval()
    x = _images()
    mu = embed(M, head, x)
    assert mu.shape == (4, 6)
    assert torch.allclose(mu.norm(dim=1), torch.ones(4), atol=1e-5)
    assert torch.equal(embed(M, head, x[:1].repeat(2, 1, 1, 1))[0], embed(M, head, x[:1].repeat(2, 1, 1, 1))[1])


def test_contrastive_gradient_reaches_encoder():
    M, head = _model()
    loss = contrastive_loss(M, head, _images(), AugmentationPolicy(), np.random.default_rng(0))
    loss.backward()
    assert sum(p.grad.abs().sum() for p in M.encoder.parameters() if p.grad is not None) > 0
    assert all(p.grad is None for p in M.decoders.parameters())


def test_contrastive_on_weak_samples(tiny_dataset):
    weak = load_split(tiny_dataset, "train", weak=True)
    M, head = _model()
    loss = contrastive_loss(M, head, torch.from_numpy(weak.images[:4]), AugmentationPolicy(),
                            np.random.default_rng(1))
    assert torch.isfinite(loss)


# ----------------------------------------------------- reconstruction


def test_reconstruction_mse_cases():
    x = _images(seed=1)
    assert reconstruction_mse(x, x).item() == 0
    assert reconstruction_mse(x + 0.1, x).item() == pytest.approx(0.01, rel=1e-5)
    y = _images(seed=2)
    want = float(np.mean((y.numpy().astype(np.float64) - x.numpy()) ** 2))
    assert rel_err(reconstruction_mse(y, x).item(), want) <= 1e-5


def test_recon_loss_shapes():
    M, _ = _model()
    dec = ReconDecoder((4, 8))
    x = _images()
    assert dec(M.encode(x)).shape == x.shape
    loss = recon_loss(M, dec, x)
    loss.backward()
    assert loss.item() > 0 and M.encoder.stem[0].weight.grad is not None
