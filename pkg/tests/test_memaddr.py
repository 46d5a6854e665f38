import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowvad.errors import InputError, ShapeError
from flowvad.memaddr import MemoryBank, address, address_map, cosine_similarity, entropy_loss, hard_shrink


TINY = np.finfo(np.float32).tiny


def _np_address(q, m):
    """Loop oracle in float64; norms at or below the float32 normal range count as zero."""
    sims = []
    for row in m:
        nq, nr = np.linalg.norm(q), np.linalg.norm(row)
        sims.append(0.0 if nq <= TINY or nr <= TINY else float(q @ row / (nq * nr)))
    e = np.exp(np.array(sims) - max(sims))
    w = e / e.sum()
    return (w[:, None] * m).sum(0), w


# entries below 1e-6 snap to 0: squares of tinier float32 values underflow and the
# float32 norm is no longer comparable with the float64 oracle
coord = st.floats(-3, 3, width=32, allow_subnormal=False).map(lambda v: 0.0 if abs(v) < 1e-6 else v)

banks = st.integers(1, 12).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda c: st.tuples(
            st.lists(coord, min_size=n * c, max_size=n * c).map(
                lambda v: torch.tensor(v).reshape(n, c)
            ),
            st.lists(coord, min_size=c, max_size=c).map(torch.tensor),
        )
    )
)


def test_hand_example():
    slots = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    out, w = address(torch.tensor([1.0, 0.0]), slots)
    e = math.e
    assert torch.allclose(w, torch.tensor([e / (e + 1), 1 / (e + 1)]), atol=1e-6)
    assert torch.allclose(w, torch.tensor([0.7311, 0.2689]), atol=1e-4)
    assert torch.allclose(out, torch.tensor([0.7311, 0.2689]), atol=1e-4)


def test_identical_slots_uniform():
    s = torch.tensor([0.3, -1.0, 2.0])
    slots = s.repeat(5, 1)
    out, w = address(torch.tensor([1.0, 2.0, 3.0]), slots)
    assert torch.allclose(w, torch.full((5,), 0.2))
    assert torch.allclose(out, s, atol=1e-6)


def test_zero_norm_similarity_is_zero():
    slots = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    assert cosine_similarity(torch.zeros(2), slots).tolist() == [0.0, 0.0]
    assert cosine_similarity(torch.tensor([1.0, -1.0]), slots)[0] == 0.0


def test_non_finite_query_rejected():
    with pytest.raises(InputError):
        address(torch.tensor([float("nan"), 0.0]), torch.eye(2))
    with pytest.raises(ShapeError):
        address(torch.ones(3), torch.eye(2))


@settings(max_examples=80, deadline=None)
@given(banks)
def test_weights_are_probabilities(bank):
    slots, q = bank
    out, w = address(q, slots)
    assert (w >= 0).all()
    assert abs(float(w.sum()) - 1.0) <= 1e-6


@settings(max_examples=80, deadline=None)
@given(banks)
def test_matches_loop_oracle_and_convex_hull(bank):
    slots, q = bank
    out, w = address(q, slots)
    ref_out, ref_w = _np_address(q.double().numpy(), slots.double().numpy())
    assert np.allclose(w.numpy(), ref_w, atol=1e-6)
    # retrieved = sum_k w_k m_k by an independent matmul
    assert np.allclose(out.double().numpy(), w.double().numpy() @ slots.double().numpy(), atol=1e-6)
    # convex hull: each coordinate between the slot extremes
    lo, hi = slots.min(0).values, slots.max(0).values
    assert (out >= lo - 1e-5).all() and (out <= hi + 1e-5).all()


@settings(max_examples=50, deadline=None)
@given(banks, st.randoms(use_true_random=False))
def test_permutation_equivariance(bank, rnd):
    slots, q = bank
    perm = list(range(len(slots)))
    rnd.shuffle(perm)
    perm = torch.tensor(perm)
    out, w = address(q, slots)
    out_p, w_p = address(q, slots[perm])
    assert torch.allclose(w_p, w[perm], atol=1e-7)
    assert torch.allclose(out_p, out, atol=1e-6)


def test_address_map_loop_oracle():
    g = torch.Generator().manual_seed(0)
    feats = torch.randn(3, 2, 2, generator=g)
    slots = torch.randn(5, 3, generator=g)
    out, wmap = address_map(feats, slots)
    assert out.shape == (3, 2, 2) and wmap.shape == (5, 2, 2)
    for h in range(2):
        for w in range(2):
            ref_out, ref_w = _np_address(feats[:, h, w].double().numpy(), slots.double().numpy())
            assert np.allclose(out[:, h, w].numpy(), ref_out, atol=1e-6)
            assert np.allclose(wmap[:, h, w].numpy(), ref_w, atol=1e-6)


def test_address_map_batched_and_1x1():
    g = torch.Generator().manual_seed(1)
    slots = torch.randn(4, 6, generator=g)
    feats = torch.randn(2, 6, 3, 5, generator=g)
    out, wmap = address_map(feats, slots)
    assert out.shape == feats.shape and wmap.shape == (2, 4, 3, 5)
    single_out, single_w = address(feats[1, :, 2, 4], slots)
    assert torch.allclose(out[1, :, 2, 4], single_out) and torch.allclose(wmap[1, :, 2, 4], single_w)
    q = feats[0, :, :1, :1]
    o1, w1 = address_map(q, slots)
    o0, w0 = address(q[:, 0, 0], slots)
    assert torch.equal(o1[:, 0, 0], o0) and torch.equal(w1[:, 0, 0], w0)


def test_constant_map_gives_constant_output():
    slots = torch.randn(7, 3, generator=torch.Generator().manual_seed(2))
    feats = torch.tensor([0.5, -1.0, 2.0])[:, None, None].expand(3, 4, 4)
    out, _ = address_map(feats, slots)
    assert torch.allclose(out, out[:, :1, :1].expand_as(out))


def test_address_map_channel_mismatch():
    with pytest.raises(ShapeError):
        address_map(torch.zeros(3, 2, 2), torch.zeros(4, 2))


def test_entropy_examples():
    assert entropy_loss([torch.tensor([0.0, 1.0, 0.0])]).item() == 0.0
    assert entropy_loss([torch.tensor([0.5, 0.5])]).item() == pytest.approx(0.6931, abs=1e-4)
    assert entropy_loss([torch.tensor([0.9, 0.1])]).item() == pytest.approx(0.3251, abs=1e-4)
    ref = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert entropy_loss([torch.tensor([0.9, 0.1], dtype=torch.float64)]).item() == pytest.approx(ref, rel=1e-12)


def test_entropy_rejects_negative():
    with pytest.raises(InputError):
        entropy_loss([torch.tensor([1.2, -0.2])])


def test_entropy_reductions_and_modules():
    w1 = torch.softmax(torch.randn(2, 5, 3, 3, generator=torch.Generator().manual_seed(0)), dim=1)
    w2 = torch.full((2, 4, 1, 1), 0.25)
    per_pos = -(w1 * w1.log()).sum(1)
    assert torch.allclose(entropy_loss([w1, w2]), per_pos.mean() + math.log(4))
    assert torch.allclose(entropy_loss([w1], "sum"), per_pos.sum())
    assert entropy_loss([]).item() == 0.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30))
def test_entropy_bounds(raw):
    w = torch.tensor(raw, dtype=torch.float64)
    if w.sum() == 0:
        w = torch.ones_like(w)
    w = w / w.sum()
    h = entropy_loss([w]).item()
    assert -1e-12 <= h <= math.log(len(w)) + 1e-9


def test_uniform_entropy_is_log_n():
    for n in (1, 2, 7, 2000):
        assert entropy_loss([torch.full((n,), 1.0 / n, dtype=torch.float64)]).item() == pytest.approx(math.log(n))


def test_hard_shrink():
    w = torch.tensor([0.6, 0.3, 0.1])
    out = hard_shrink(w, 0.2)
    assert out[2] == 0
    assert torch.allclose(out.sum(), torch.tensor(1.0))
    assert out[0] / out[1] > 1.9  # ordering kept, small weight dropped


def test_bank_init_and_forward():
    g = torch.Generator().manual_seed(0)
    bank = MemoryBank(2000, 64, generator=g)
    assert bank.slots.shape == (2000, 64)
    bound = 1 / math.sqrt(64)
    assert bank.slots.abs().max() <= bound
    out, w = bank(torch.randn(2, 64, 4, 4))
    assert out.shape == (2, 64, 4, 4) and w.shape == (2, 2000, 4, 4)
    assert torch.allclose(w.sum(1), torch.ones(2, 4, 4), atol=1e-5)
    with pytest.raises(ShapeError):
        MemoryBank(0, 4)
