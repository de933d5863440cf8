import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from smsge.mgrn import MGRN, aggregate_heads, collab_matrix, fuse, structural_logits, t_softmax

import oracles


def path_mask(n):
    m = np.eye(n, dtype=bool)
    for i in range(n - 1):
        m[i, i + 1] = m[i + 1, i] = True
    return torch.from_numpy(m)


def neighbors_of(mask):
    return [list(np.nonzero(row)[0]) for row in mask.numpy()]


def rand(rng, *shape):
    return torch.from_numpy(rng.normal(size=shape))


def test_t_softmax_closed_form():
    w = t_softmax(torch.tensor([1.0, 0.0], dtype=torch.float64))
    e = math.e
    np.testing.assert_allclose(w.numpy(), [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(w.numpy(), [0.7311, 0.2689], atol=1e-4)


def test_t_softmax_uniform_and_high_temperature():
    np.testing.assert_allclose(t_softmax(torch.zeros(4, dtype=torch.float64)).numpy(), 0.25)
    hot = t_softmax(torch.tensor([1.0, 0.0], dtype=torch.float64), 1000.0)
    np.testing.assert_allclose(hot.numpy(), [0.5, 0.5], atol=1e-3)


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_t_softmax_rejects_nonpositive_temperature(temperature):
    with pytest.raises(ValueError, match="temperature"):
        t_softmax(torch.zeros(3), temperature)


def test_t_softmax_no_overflow():
    w = t_softmax(torch.tensor([1000.0, 999.0], dtype=torch.float64))
    assert torch.isfinite(w).all()


logit_vectors = arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.floats(-50, 50))
def test_t_softmax_shift_invariant(x, c):
    a = t_softmax(torch.from_numpy(x))
    b = t_softmax(torch.from_numpy(x + c))
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-5, 5)), st.floats(0.5, 10),
       st.floats(1.01, 5))
def test_higher_temperature_narrows_spread(x, t, factor):
    if np.ptp(x) < 1e-3:
        return
    lo = t_softmax(torch.from_numpy(x), t).numpy()
    hi = t_softmax(torch.from_numpy(x), t * factor).numpy()
    assert np.ptp(hi) < np.ptp(lo)


def test_zero_relation_vector_gives_zero_logits():
    rng = np.random.default_rng(0)
    mask = path_mask(4)
    e = structural_logits(rand(rng, 4, 3), mask, rand(rng, 2, 5, 3), torch.zeros(2, 10,
                                                                                  dtype=torch.float64))
    assert torch.all(e[:, mask] == 0)
    assert torch.all(torch.isinf(e[:, ~mask]))


def test_symmetric_logits_for_equal_nodes():
    rng = np.random.default_rng(1)
    v = rand(rng, 1, 3).repeat(3, 1)
    half = rand(rng, 1, 4)
    wr = torch.cat([half, half], dim=1)
    e = structural_logits(v, path_mask(3), rand(rng, 1, 4, 3), wr)[0]
    assert e[0, 1] == e[1, 0]


def test_structural_logits_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="dimension mismatch"):
        structural_logits(rand(rng, 3, 3), path_mask(3), rand(rng, 1, 4, 3), rand(rng, 1, 6))


@pytest.mark.parametrize("seed", range(5))
def test_structural_logits_match_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    n, p, d_t = int(rng.integers(3, 7)), 2, 4
    pos, wv, wr = rand(rng, n, 3), rand(rng, p, d_t, 3), rand(rng, p, 2 * d_t)
    mask = path_mask(n)
    got = structural_logits(pos, mask, wv, wr)
    for h in range(p):
        want = oracles.structural_logits(pos.tolist(), neighbors_of(mask), wv[h].tolist(),
                                         wr[h].tolist())
        for (i, j), value in want.items():
            assert abs(got[h, i, j].item() - value) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_aggregate_heads_match_scalar_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n, p, d_t = int(rng.integers(3, 7)), 2, 4
    pos, wv, wr = rand(rng, n, 3), rand(rng, p, d_t, 3), rand(rng, p, 2 * d_t)
    mask = path_mask(n)
    got = aggregate_heads(pos, mask, wv, wr, temperature=1.5).numpy()
    want = oracles.aggregate_heads(pos.tolist(), neighbors_of(mask), wv.tolist(), wr.tolist(), 1.5)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_isolated_node_single_head():
    rng = np.random.default_rng(2)
    pos, wv, wr = rand(rng, 1, 3), rand(rng, 1, 5, 3), rand(rng, 1, 10)
    mask = torch.ones(1, 1, dtype=torch.bool)
    got = aggregate_heads(pos, mask, wv, wr)
    np.testing.assert_allclose(got.numpy(), torch.relu(pos @ wv[0].T).numpy(), atol=1e-14)


def test_duplicated_head_matches_single_head():
    rng = np.random.default_rng(3)
    pos, wv, wr = rand(rng, 4, 3), rand(rng, 1, 5, 3), rand(rng, 1, 10)
    mask = path_mask(4)
    one = aggregate_heads(pos, mask, wv, wr)
    two = aggregate_heads(pos, mask, wv.repeat(2, 1, 1), wr.repeat(2, 1))
    np.testing.assert_allclose(one.numpy(), two.numpy(), atol=1e-14)


def test_uniform_attention_averages_neighbors():
    pos = torch.tensor([[1.0, 0, 0], [3.0, 0, 0], [5.0, 0, 0]], dtype=torch.float64)
    wv = torch.eye(3, dtype=torch.float64)[None]
    got = aggregate_heads(pos, path_mask(3), wv, None, structural=False)
    np.testing.assert_allclose(got[:, 0].numpy(), [2.0, 3.0, 4.0])


@pytest.mark.parametrize("seed", range(5))
def test_collab_matrix_matches_gram_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    a, b = rand(rng, int(rng.integers(2, 7)), 4), rand(rng, int(rng.integers(2, 7)), 4)
    got = collab_matrix(a, b, 0.7).numpy()
    want = oracles.collab_matrix(a.tolist(), b.tolist(), 0.7)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_collab_matrix_uniform_for_identical_targets():
    rng = np.random.default_rng(4)
    b = rand(rng, 1, 4).repeat(5, 1)
    got = collab_matrix(rand(rng, 3, 4), b)
    np.testing.assert_allclose(got.numpy(), 0.2, atol=1e-15)


def test_collab_matrix_low_temperature_orthonormal_is_identity():
    e = torch.eye(4, dtype=torch.float64)
    np.testing.assert_allclose(collab_matrix(e, e, 1e-3).numpy(), np.eye(4), atol=1e-12)


def test_collab_matrix_scale_order():
    with pytest.raises(ValueError, match="a <= b"):
        collab_matrix(torch.zeros(2, 2), torch.zeros(2, 2), scales=(2, 1))


def test_fuse_identity_cases():
    rng = np.random.default_rng(5)
    emb = {0: rand(rng, 6, 4), 1: rand(rng, 3, 4)}
    collabs = {(a, b): collab_matrix(emb[a], emb[b]) for a in emb for b in emb if a <= b}
    maps = {k: rand(rng, 4, 4) for k in collabs}
    out = fuse(emb, collabs, maps, 0.0)
    for m in emb:
        assert torch.equal(out[m], emb[m])
    single = {3: rand(rng, 5, 4)}
    out = fuse(single, {(3, 3): collab_matrix(single[3], single[3])},
               {(3, 3): torch.zeros(4, 4, dtype=torch.float64)})
    assert torch.equal(out[3], single[3])


def test_fuse_is_synchronous_and_matches_loop():
    rng = np.random.default_rng(6)
    emb = {0: rand(rng, 4, 3), 2: rand(rng, 3, 3), 3: rand(rng, 2, 3)}
    collabs = {(a, b): collab_matrix(emb[a], emb[b]) for a in emb for b in emb if a <= b}
    maps = {k: rand(rng, 3, 3) for k in collabs}
    out = fuse(emb, collabs, maps, 0.5)
    for a in emb:
        want = emb[a].clone()
        for b in emb:
            if b < a:
                continue
            for i in range(want.shape[0]):
                for j in range(emb[b].shape[0]):
                    want[i] += 0.5 * collabs[(a, b)][i, j] * (maps[(a, b)] @ emb[b][j])
        np.testing.assert_allclose(out[a].numpy(), want.numpy(), atol=1e-12)


def test_fuse_missing_pair():
    emb = {0: torch.zeros(2, 2), 1: torch.zeros(2, 2)}
    with pytest.raises(KeyError, match="missing"):
        fuse(emb, {(0, 0): torch.zeros(2, 2)}, {(0, 0): torch.zeros(2, 2)})


def kinect20_inputs(rng):
    from smsge.graph import ScaleLayout, SkeletonSpec
    layout = ScaleLayout.from_spec(SkeletonSpec.from_preset("kinect20"))
    frame = rng.normal(size=(20, 3))
    lifted = layout.lift(frame)
    pos = {m: torch.from_numpy(lifted[m]) for m in range(4)}
    masks = {m: torch.from_numpy(layout.neighbor_mask(m)) for m in range(4)}
    return pos, masks


def test_mgrn_forward_shapes():
    rng = np.random.default_rng(7)
    net = MGRN(range(4))
    net.reset_parameters(torch.Generator().manual_seed(0))
    pos, masks = kinect20_inputs(rng)
    out = net(pos, masks)
    assert [tuple(out[m].shape) for m in range(4)] == [(39, 8), (20, 8), (10, 8), (5, 8)]


def test_mgrn_zero_parameters_give_zero_embeddings():
    rng = np.random.default_rng(8)
    net = MGRN(range(4))
    pos, masks = kinect20_inputs(rng)
    out = net(pos, masks)
    assert all(torch.all(out[m] == 0) for m in range(4))


def test_mgrn_without_collaboration_returns_prefusion():
    rng = np.random.default_rng(9)
    gen = torch.Generator().manual_seed(1)
    full = MGRN(range(4))
    full.reset_parameters(gen)
    no_cr = MGRN(range(4), collaborative=False)
    no_cr.node_map.load_state_dict(full.node_map.state_dict())
    no_cr.relation.load_state_dict(full.relation.state_dict())
    pos, masks = kinect20_inputs(rng)
    out = no_cr(pos, masks)
    for m in range(4):
        wv, wr = full.relation_params(m)
        np.testing.assert_allclose(out[m].detach().numpy(),
                                   aggregate_heads(pos[m], masks[m], wv, wr).detach().numpy())


def test_mgrn_node_relabeling_equivariance():
    rng = np.random.default_rng(10)
    n = 5
    net = MGRN([1, 3], heads=3, feature_dim=4)
    net.reset_parameters(torch.Generator().manual_seed(2))
    pos = {1: rand(rng, n, 3), 3: rand(rng, 3, 3)}
    masks = {1: path_mask(n), 3: path_mask(3)}
    perm = torch.from_numpy(rng.permutation(n))
    out = net(pos, masks)
    pos_p = {1: pos[1][perm], 3: pos[3]}
    masks_p = {1: masks[1][perm][:, perm], 3: masks[3]}
    out_p = net(pos_p, masks_p)
    np.testing.assert_allclose(out_p[1].detach().numpy(), out[1][perm].detach().numpy(), atol=1e-12)
    np.testing.assert_allclose(out_p[3].detach().numpy(), out[3].detach().numpy(), atol=1e-12)


def _fd_check(fn, params, eps=1e-6):
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            num = np.empty(flat.numel())
            for c in range(flat.numel()):
                orig = flat[c].item()
                flat[c] = orig + eps
                up = fn().item()
                flat[c] = orig - eps
                down = fn().item()
                flat[c] = orig
                num[c] = (up - down) / (2 * eps)
            a = g.view(-1).numpy()
            worst = max(worst, np.linalg.norm(a - num) / max(np.linalg.norm(a), np.linalg.norm(num)))
    return worst


def test_operation_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    pos = rand(rng, 4, 3)
    mask = path_mask(4)
    wv = rand(rng, 2, 3, 3).requires_grad_()
    wr = rand(rng, 2, 6).requires_grad_()
    other = rand(rng, 3, 3).requires_grad_()
    wc = rand(rng, 3, 3).requires_grad_()
    target = rand(rng, 4, 3)

    def loss():
        e = structural_logits(pos, mask, wv, wr)
        emb = aggregate_heads(pos, mask, wv, wr)
        a = collab_matrix(emb, other)
        fused = fuse({0: emb, 1: other}, {(0, 0): collab_matrix(emb, emb), (0, 1): a,
                                          (1, 1): collab_matrix(other, other)},
                     {(0, 0): wc, (0, 1): wc, (1, 1): wc})
        return (fused[0] - target).pow(2).sum() + e[torch.isfinite(e)].sin().sum()

    assert _fd_check(loss, [wv, wr, other, wc]) < 1e-4
