import math
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tndp.model import (
    CheckpointError,
    ModelConfig,
    TNDP,
    build_mask,
    collate,
    load_weights,
    policy_distribution,
    save_weights,
)

SMALL = dict(embed_dim=16, n_layers=2, n_heads=4, mlp_hidden=32, embedder_depth=2, embedder_hidden=16,
             head_hidden=16)


def _model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**dict(d_x=1, max_steps=5), **SMALL, **kw})
    return TNDP(cfg).eval()


def _batch(rng, n_c=3, n_p=4, n_q=5, d_x=1, step=2, gamma=False, tags=None, dtype=torch.float32):
    item = dict(xc=rng.uniform(-1, 1, (n_c, d_x)), yc=rng.normal(size=n_c), xp=rng.uniform(-1, 1, (n_p, d_x)),
                xq=rng.uniform(-1, 1, (n_q, d_x)), step=step)
    if gamma:
        item["gamma"] = rng.uniform(-1, 1, d_x)
    if tags:
        item.update(tc=rng.integers(0, tags, n_c), tp=rng.integers(0, tags, n_p), tq=rng.integers(0, tags, n_q))
    return item, collate([item], dtype=dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_x=1, max_steps=1, embed_dim=30, n_heads=8)
    with pytest.raises(ValueError):
        ModelConfig(d_x=0, max_steps=1)


def test_default_config_sizes():
    c = ModelConfig(d_x=1, max_steps=1)
    assert (c.embed_dim, c.n_layers, c.n_heads, c.mlp_hidden) == (32, 6, 8, 128)
    assert (c.embedder_depth, c.embedder_hidden, c.head_hidden) == (4, 32, 32)


def test_token_count_with_task_context():
    m = _model(gamma_dim=1)
    _, b = _batch(np.random.default_rng(0), n_c=2, n_p=2, n_q=2, gamma=True)
    assert m.embed(b).shape == (1, 7, 16)


def test_token_count_empty_context():
    m = _model()
    _, b = _batch(np.random.default_rng(0), n_c=0, n_p=3, n_q=4, step=0)
    assert m.embed(b).shape[1] == 3 + 4 + 1


def test_same_design_same_embedding():
    m = _model()
    item, _ = _batch(np.random.default_rng(0))
    item["xq"][0] = item["xp"][1]
    e = m.embed(collate([item]))
    assert torch.equal(e[0, 3 + 1], e[0, 3 + 4])


def test_design_dimension_mismatch():
    m = _model()
    _, b = _batch(np.random.default_rng(0), d_x=2)
    with pytest.raises(ValueError):
        m(b)


def test_mask_prediction_row_count():
    mask = build_mask(2, 2, 2, 1)
    assert mask[2].sum() == 4
    assert mask[2].tolist() == [True, True, True, False, False, False, True]


def test_mask_no_context():
    assert build_mask(0, 1, 1, 1)[0].tolist() == [True, False, True]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(1, 2))
def test_mask_invariants(n_c, n_p, n_q, n_gi):
    m = build_mask(n_c, n_p, n_q, n_gi)
    n = n_c + n_p + n_q + n_gi
    ctx, gi = np.arange(n_c), np.arange(n - n_gi, n)
    targets = np.arange(n_c, n_c + n_p + n_q)
    for i in list(ctx) + list(gi):
        assert m[i, ctx].all() and m[i, gi].all() and not m[i, targets].any()
    for i in targets:
        assert m[i, ctx].all() and m[i, gi].all() and m[i, i]
        others = targets[targets != i]
        assert not m[i, others].any()


def test_mask_negative_count():
    with pytest.raises(ValueError):
        build_mask(-1, 1, 1, 1)


def test_context_permutation_invariance():
    m = _model()
    item, b = _batch(np.random.default_rng(1), n_c=6)
    perm = np.random.default_rng(2).permutation(6)
    item2 = dict(item, xc=item["xc"][perm], yc=item["yc"][perm])
    a, c = m(b), m(collate([item2]))
    for u, v in ((a.mean, c.mean), (a.std, c.std), (a.logits, c.logits)):
        assert torch.allclose(u, v, atol=1e-5)


def test_removing_query_leaves_others_unchanged():
    m = _model()
    item, b = _batch(np.random.default_rng(3))
    out = m(b)
    out2 = m(collate([dict(item, xq=item["xq"][1:])]))
    assert torch.allclose(out.mean, out2.mean, atol=1e-5)
    assert torch.allclose(out.logits[:, 1:], out2.logits, atol=1e-5)


def test_perturbing_prediction_leaves_queries_unchanged():
    m = _model()
    item, b = _batch(np.random.default_rng(4))
    xp = item["xp"].copy()
    xp[0] += 0.37
    out, out2 = m(b), m(collate([dict(item, xp=xp)]))
    assert torch.allclose(out.logits, out2.logits, atol=1e-5)
    assert torch.allclose(out.mean[:, 1:], out2.mean[:, 1:], atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.integers(1, 5), st.integers(1, 5))
def test_std_positive_and_logits_finite(seed, n_c, n_p, n_q):
    m = _model(seed % 7)
    _, b = _batch(np.random.default_rng(seed), n_c=n_c, n_p=n_p, n_q=n_q)
    b.yc = b.yc * 100
    out = m(b)
    assert (out.std > 0).all()
    assert torch.isfinite(out.logits).all() and out.logits.shape == (1, n_q)
    assert out.mean.shape == (1, n_p)


def test_structured_attention_matches_dense_mask():
    m = _model(n_decisions=3, gamma_dim=2, d_x=2).double()
    _, b = _batch(np.random.default_rng(5), d_x=2, gamma=True, tags=3, dtype=torch.float64)
    a, d = m(b), m(b, dense=True)
    for u, v in ((a.mean, d.mean), (a.std, d.std), (a.logits, d.logits)):
        assert torch.allclose(u, v, atol=1e-10)


def test_decision_tags_required_when_configured():
    m = _model(n_decisions=3)
    _, b = _batch(np.random.default_rng(0))
    with pytest.raises(ValueError):
        m(b)


def test_step_beyond_horizon():
    m = _model()
    _, b = _batch(np.random.default_rng(0), step=6)
    with pytest.raises(ValueError):
        m(b)


def test_policy_uniform():
    assert np.allclose(policy_distribution([0, 0, 0, 0]), 0.25)


def test_policy_closed_form():
    assert np.allclose(policy_distribution([1.0, 1.0 + math.log(2)]), [1 / 3, 2 / 3], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(-100, 100))
def test_policy_shift_invariant(logits, c):
    p = policy_distribution(logits)
    assert np.all(p > 0) and abs(p.sum() - 1) < 1e-6
    assert np.allclose(p, policy_distribution(np.array(logits) + c), atol=1e-9)


def test_policy_empty():
    with pytest.raises(ValueError):
        policy_distribution([])


def test_save_load_round_trip(tmp_path):
    m = _model(3, gamma_dim=1)
    path = str(tmp_path / "w.pt")
    save_weights(m, path)
    m2 = load_weights(path).eval()
    for (k, v), (k2, v2) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    _, b = _batch(np.random.default_rng(0), gamma=True)
    assert torch.allclose(m(b).mean, m2(b).mean, atol=1e-7)


def test_load_wrong_signature(tmp_path):
    m = _model()
    path = str(tmp_path / "w.pt")
    save_weights(m, path)
    other = ModelConfig(d_x=1, max_steps=9, **SMALL)
    with pytest.raises(CheckpointError):
        load_weights(path, expected=other)


def test_load_truncated_file(tmp_path):
    m = _model()
    path = str(tmp_path / "w.pt")
    save_weights(m, path)
    size = os.path.getsize(path)
    with open(path, "r+b") as fh:
        fh.truncate(size // 2)
    with pytest.raises(CheckpointError):
        load_weights(path)


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    m = _model()
    path = str(tmp_path / "w.pt")
    save_weights(m, path)
    before = open(path, "rb").read()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(torch, "save", boom)
    with pytest.raises(OSError):
        save_weights(_model(1), path)
    assert open(path, "rb").read() == before
    assert [p.name for p in tmp_path.iterdir()] == ["w.pt"]


def test_gradient_matches_finite_differences():
    m = _model(7, gamma_dim=1).double()
    _, b = _batch(np.random.default_rng(8), gamma=True, dtype=torch.float64)
    target = torch.as_tensor(np.random.default_rng(9).normal(size=(1, 4)))

    def loss():
        out = m(b)
        nll = 0.5 * ((target - out.mean) / out.std) ** 2 + out.std.log()
        return nll.sum() - torch.log_softmax(out.logits, -1)[0, 1]

    m.zero_grad()
    loss().backward()
    flat = [(p, i) for p in m.parameters() for i in range(p.numel())]
    rng = np.random.default_rng(10)
    checked = 0
    for j in rng.permutation(len(flat)):
        p, i = flat[j]
        g = p.grad.view(-1)[i].item()
        if abs(g) < 1e-6:
            continue
        h = 1e-6
        with torch.no_grad():
            p.view(-1)[i] += h
            up = loss().item()
            p.view(-1)[i] -= 2 * h
            dn = loss().item()
            p.view(-1)[i] += h
        fd = (up - dn) / (2 * h)
        assert abs(g - fd) / max(abs(fd), 1e-8) < 1e-3, (g, fd)
        checked += 1
        if checked == 20:
            break
    assert checked == 20
