import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smalign.aligner import AlignHead, head_grad_check, read_heads, write_heads
from smalign.sets import EmbeddingBlock, Modality
from smalign.tensor import Rng, ShapeError


def scalar_glu(head, x):
    """Straight-line reimplementation, one output coordinate at a time."""
    p = head.params
    out = []
    for row in x:
        h = []
        for j in range(head.hidden):
            v = sum(float(row[i]) * float(p["W_value"][i, j]) for i in range(head.in_dim)) + float(p["b_value"][j])
            g = sum(float(row[i]) * float(p["W_gate"][i, j]) for i in range(head.in_dim)) + float(p["b_gate"][j])
            h.append(v / (1.0 + math.exp(-g)))
        o = [sum(h[j] * float(p["W_out"][j, k]) for j in range(head.hidden)) + float(p["b_out"][k])
             for k in range(head.out_dim)]
        norm = math.sqrt(sum(c * c for c in o))
        out.append([c / norm for c in o])
    return np.array(out)


def test_identity_linear_head_normalizes():
    head = AlignHead("linear", 3, 3, params={"W": np.eye(3), "b": np.zeros(3)})
    x = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]])
    assert np.allclose(head.forward(x), [[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]])


def test_saturated_gate_gives_output_bias():
    head = AlignHead("glu", 4, 2, hidden=3, seed=1)
    params = dict(head.params)
    params["b_gate"] = np.full(3, -1e3)
    params["b_out"] = np.array([3.0, 4.0])
    head.update(params)
    out = head.forward(Rng(2).normal((5, 4)))
    assert np.allclose(out, [[0.6, 0.8]] * 5)


def test_glu_matches_scalar_oracle():
    head = AlignHead("glu", 5, 3, hidden=4, seed=3)
    params = {k: v + Rng(4).normal(v.shape, 0.1).astype(np.float32) for k, v in head.params.items()}
    head.update(params)
    x = Rng(5).normal((6, 5))
    assert np.max(np.abs(head.forward(x) - scalar_glu(head, x))) < 1e-6


def test_parameter_counts():
    assert AlignHead("linear", 7, 3).num_params == 7 * 3 + 3
    assert AlignHead("linear", 7, 3, bias=False).num_params == 21
    assert AlignHead("glu", 7, 3, hidden=5).num_params == 2 * 7 * 5 + 5 * 3 + 5 + 5 + 3
    assert AlignHead("glu", 7, 3).hidden == 3


def test_init_is_seeded_uniform():
    a, b = AlignHead("glu", 16, 4, seed=9), AlignHead("glu", 16, 4, seed=9)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert np.all(np.abs(a.params["W_value"]) <= 1 / 4) and np.all(a.params["b_out"] == 0)
    assert not np.array_equal(a.params["W_gate"], AlignHead("glu", 16, 4, seed=10).params["W_gate"])


def test_project_keeps_ids_and_modality():
    head = AlignHead("linear", 3, 2, seed=0)
    block = EmbeddingBlock(Rng(1).normal((4, 3)), [5, 5, 6, 7], Modality.Y)
    out = head.project(block)
    assert out.modality is Modality.Y and out.entity_ids.tolist() == [5, 5, 6, 7] and out.dim == 2


def test_shape_errors():
    head = AlignHead("glu", 3, 2)
    with pytest.raises(ShapeError):
        head.forward(np.ones((2, 4)))
    with pytest.raises(ShapeError):
        head.backward(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        head.update({**head.params, "W_out": np.ones((3, 3))})
    with pytest.raises(ValueError):
        AlignHead("mlp", 3, 2)


def test_zero_upstream_gradient():
    head = AlignHead("glu", 4, 3, seed=1)
    grads, dx = head.backward(Rng(0).normal((5, 4)), np.zeros((5, 3)))
    assert all(np.all(g == 0) for g in grads.values()) and np.all(dx == 0)
    assert list(grads) == [n for n, _ in head.shapes]


@pytest.mark.parametrize("kind", ["linear", "glu"])
@pytest.mark.parametrize("bias", [True, False])
def test_backward_matches_finite_differences(kind, bias):
    rng = Rng(11)
    head = AlignHead(kind, 4, 3, hidden=5, bias=bias, seed=12)
    err, where, n = head_grad_check(head, rng.normal((3, 4)), rng.normal((3, 3)))
    assert err < 1e-4, where
    assert n == head.num_params + 12


def test_identity_head_input_gradient_is_tangent():
    head = AlignHead("linear", 4, 4, params={"W": np.eye(4), "b": np.zeros(4)})
    rng = Rng(13)
    x, g = rng.normal((6, 4)), rng.normal((6, 4))
    _, dx = head.backward(x, g)
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    assert np.allclose((dx * u).sum(axis=1), 0.0, atol=1e-12)


@settings(max_examples=30)
@given(st.floats(1e-3, 1e3), st.integers(0, 100))
def test_forward_deterministic_and_finite(norm, seed):
    head = AlignHead("glu", 6, 4, seed=seed)
    x = Rng(seed).normal((3, 6))
    x = x / np.linalg.norm(x, axis=1, keepdims=True) * norm
    a, b = head.forward(x), head.forward(x)
    assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a))


def test_checkpoint_round_trip(tmp_path):
    heads = [AlignHead("glu", 6, 4, hidden=5, seed=1), AlignHead("linear", 8, 4, bias=False, seed=2)]
    path = tmp_path / "heads.smah"
    write_heads(path, heads)
    back = read_heads(path)
    assert [h.kind for h in back] == ["glu", "linear"] and back[1].bias is False
    for a, b in zip(heads, back):
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
    write_heads(tmp_path / "again.smah", back)
    assert (tmp_path / "again.smah").read_bytes() == path.read_bytes()
    # header: magic, version, kind, has_bias, in, hidden, out
    assert path.read_bytes()[:4] == b"SMAH"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "h.smah"
    write_heads(path, [AlignHead("linear", 3, 2)])
    raw = path.read_bytes()
    (tmp_path / "cut.smah").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_heads(tmp_path / "cut.smah")
    (tmp_path / "magic.smah").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_heads(tmp_path / "magic.smah")
    (tmp_path / "empty.smah").write_bytes(b"")
    with pytest.raises(ValueError):
        read_heads(tmp_path / "empty.smah")
