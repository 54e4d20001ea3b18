import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grec.align import (
    AlignedBatch,
    N_SIDE,
    embed_history_item,
    embed_query,
    embed_target,
    igr_retrieve,
    igr_select_batch,
    q2i_loss,
    q2i_terms,
    side_features,
)
from grec.catalog import Action, InteractionEvent
from grec.instruction import ReasoningInstruction, ScenarioInstruction


def test_side_features_buckets():
    u = side_features(Action.CART, 0)
    assert u.shape == (N_SIDE,) and u.sum() == 2 and u[1] == 1 and u[3] == 1
    assert side_features("click", 3600)[4] == 1
    assert side_features("purchase", 10 ** 7)[-1] == 1


def test_query_deterministic(tiny_model):
    names = tiny_model.scenario_names
    I_s = ScenarioInstruction(names[1], 3)
    I_r = ReasoningInstruction.from_query("warm jacket")
    a = embed_query(I_s, I_r, tiny_model.adapter, names)
    b = embed_query(I_s, I_r, tiny_model.adapter, names)
    assert torch.equal(a, b)
    assert a.norm().item() == pytest.approx(1.0)


def test_identity_projection_returns_scenario_part(tiny_model):
    ad = tiny_model.adapter
    ad.psi_q.identity_init()
    names = tiny_model.scenario_names
    q = embed_query(ScenarioInstruction(names[0]), ReasoningInstruction.default(), ad, names)
    with torch.no_grad():
        phi = torch.cat([ad.scn_table.weight[0], ad.z_default, ad.default_reasoning])
    d = q.shape[0]
    expect = phi[:d] / phi[:d].norm()
    assert torch.allclose(q, expect, atol=1e-6)


def test_query_gradient_matches_finite_differences(tiny_model64):
    ad = tiny_model64.adapter
    s = torch.tensor([1, 2])
    z = torch.tensor([4, -1])
    feats = torch.randn(2, ad.instr_dim, dtype=torch.float64)
    is_def = torch.tensor([False, True])
    w = torch.randn(2, ad.psi_q.fc2.out_features, dtype=torch.float64)

    def f():
        return (ad.query(s, z, feats, is_def) * w).sum()

    f().backward()
    W = ad.psi_q.fc1.weight
    h = 1e-4
    for idx in [(0, 0), (3, 5), (7, 20), (10, 2)]:
        with torch.no_grad():
            W[idx] += h
            up = f().item()
            W[idx] -= 2 * h
            dn = f().item()
            W[idx] += h
        fd = (up - dn) / (2 * h)
        g = W.grad[idx].item()
        assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-8)


def test_target_equals_history_at_init(tiny_model):
    ev = InteractionEvent(0, 7, "homepage", Action.PURCHASE, 1000)
    t = embed_target(ev, tiny_model.adapter, now=5000)
    h = embed_history_item(ev, tiny_model.adapter, now=5000)
    assert torch.allclose(t, h, atol=1e-6)


def test_history_branch_has_no_gradient(tiny_model):
    ad = tiny_model.adapter
    h = ad.history(torch.tensor([1, 2, 3]), torch.ones(3, N_SIDE))
    assert not h.requires_grad
    ev = InteractionEvent(0, 3, "homepage", Action.CLICK, 0)
    emb = embed_history_item(ev, ad)
    assert emb.grad_fn is None
    for p in ad.parameters():
        assert p.grad is None or float(p.grad.norm()) == 0.0


def test_unknown_item_rejected(tiny_model):
    with pytest.raises(KeyError):
        embed_target(InteractionEvent(0, 10 ** 6, "homepage", Action.CLICK, 0), tiny_model.adapter)


def test_target_matches_reimplementation(tiny_model):
    ad = tiny_model.adapter
    with torch.no_grad():
        P = {k: v.double().numpy() for k, v in ad.state_dict().items()}
    gelu = np.vectorize(lambda x: 0.5 * x * (1 + math.erf(x / math.sqrt(2))))
    for k, (item, action, age) in enumerate([(0, "click", 0), (5, "cart", 7200), (11, "purchase", 90000),
                                             (20, "click", 10 ** 6), (33, "cart", 60)]):
        u = side_features(action, age)
        side = P["side.weight"] @ u + P["side.bias"]
        text = P["g_train.weight"] @ P["item_text"][item] + P["g_train.bias"]
        e = np.concatenate([P["item_table.weight"][item], side, text])
        hid = gelu(P["psi_i.fc1.weight"] @ e + P["psi_i.fc1.bias"])
        out = P["psi_i.skip.weight"] @ e + P["psi_i.fc2.weight"] @ hid + P["psi_i.fc2.bias"]
        out /= np.linalg.norm(out)
        ev = InteractionEvent(0, item, "homepage", Action(action), 0)
        got = embed_target(ev, ad, now=age).double().detach().numpy()
        assert np.allclose(got, out, atol=1e-5), k


def _pair():
    return np.array([[1.0, 0.0], [0.0, 1.0]])


def test_q2i_perfect_alignment():
    loss, _ = q2i_loss(AlignedBatch(_pair(), _pair()), 0.0, 0.0)
    assert loss == pytest.approx(-1.0)


def test_q2i_orthogonal_decorrelation_zero():
    l0, _ = q2i_loss(AlignedBatch(_pair(), _pair()), 0.0, 0.0)
    l1, _ = q2i_loss(AlignedBatch(_pair(), _pair()), 0.0, 1.0)
    assert l1 == pytest.approx(l0)


def test_q2i_variance_term():
    l0, _ = q2i_loss(AlignedBatch(_pair(), _pair()), 0.0, 0.0)
    l1, _ = q2i_loss(AlignedBatch(_pair(), _pair()), 1.0, 0.0)
    assert l1 - l0 == pytest.approx(-math.log(0.0625), abs=1e-6)
    assert -math.log(0.0625) == pytest.approx(2.7726, abs=1e-4)


def test_q2i_rejects_bad_batches():
    with pytest.raises(ValueError):
        AlignedBatch(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        AlignedBatch(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        q2i_terms(torch.ones(1, 2), torch.ones(1, 2), 0.1, 0.1)


def _unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_q2i_analytic_gradient_matches_fd():
    rng = np.random.default_rng(3)
    Q, T = _unit_rows(rng, 5, 4), _unit_rows(rng, 5, 4)
    _, (dQ, dT) = q2i_loss(AlignedBatch(Q, T), 0.3, 0.7)
    h = 1e-6

    def raw(Qm, Tm):
        # normalisation is the caller's business; perturb without the unit-norm check
        B = AlignedBatch.__new__(AlignedBatch)
        B.Q, B.T = Qm, Tm
        return q2i_loss(B, 0.3, 0.7)[0]

    for (i, j) in [(0, 0), (2, 3), (4, 1)]:
        for M, G in ((Q, dQ), (T, dT)):
            M[i, j] += h
            up = raw(Q, T)
            M[i, j] -= 2 * h
            dn = raw(Q, T)
            M[i, j] += h
            fd = (up - dn) / (2 * h)
            assert abs(fd - G[i, j]) <= 1e-4 * max(1.0, abs(fd))


def test_q2i_torch_matches_numpy():
    rng = np.random.default_rng(8)
    Q, T = _unit_rows(rng, 6, 3), _unit_rows(rng, 6, 3)
    loss, _ = q2i_loss(AlignedBatch(Q, T), 0.2, 0.5)
    terms = q2i_terms(torch.tensor(Q), torch.tensor(T), 0.2, 0.5)
    assert terms["total"].item() == pytest.approx(loss, rel=1e-12)


def test_q2i_torch_gradient_matches_analytic():
    rng = np.random.default_rng(9)
    Q, T = _unit_rows(rng, 4, 3), _unit_rows(rng, 4, 3)
    _, (dQ, dT) = q2i_loss(AlignedBatch(Q, T), 0.4, 0.6)
    tq = torch.tensor(Q, requires_grad=True)
    tt = torch.tensor(T, requires_grad=True)
    q2i_terms(tq, tt, 0.4, 0.6)["total"].backward()
    assert np.allclose(tq.grad.numpy(), dQ, atol=1e-10)
    assert np.allclose(tt.grad.numpy(), dT, atol=1e-10)


def test_igr_k_exceeds_history():
    h = np.array([[0.1, 0.0], [0.9, 0.0], [0.5, 0.0]])
    assert igr_retrieve(np.array([1.0, 0.0]), h, 10) == [1, 2, 0]


def test_igr_identical_vector_first():
    h = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert igr_retrieve(np.array([1.0, 0.0, 0.0]), h, 1) == [1]


def test_igr_matches_full_sort():
    rng = np.random.default_rng(0)
    q = rng.normal(size=16)
    h = rng.normal(size=(100, 16))
    scores = h @ q
    expect = sorted(range(100), key=lambda i: -scores[i])[:7]
    assert igr_retrieve(q, h, 7) == expect


def test_igr_empty_and_bad_k():
    assert igr_retrieve(np.ones(3), np.zeros((0, 3)), 4) == []
    with pytest.raises(ValueError):
        igr_retrieve(np.ones(3), np.ones((2, 3)), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 10_000))
def test_igr_batch_agrees_with_scalar(m, k, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4))
    h = rng.normal(size=(3, m, 4))
    valid = rng.uniform(size=(3, m)) < 0.7
    got = igr_select_batch(torch.tensor(q), torch.tensor(h), torch.tensor(valid), k).numpy()
    for b in range(3):
        idx = np.flatnonzero(valid[b])
        expect = [int(idx[i]) for i in igr_retrieve(q[b], h[b][idx], k)] if len(idx) else []
        expect += [-1] * (k - len(expect))
        assert got[b].tolist() == expect
