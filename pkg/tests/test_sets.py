import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smalign.sets import EmbeddingBlock, Modality, build_entity_batch, negative_index_sets
from smalign.tensor import Rng, ShapeError


def make_batch(views_x, views_y, dim=3, seed=0, shuffle=False):
    rng = Rng(seed)
    ids_x = np.repeat(np.arange(len(views_x)), views_x)
    ids_y = np.repeat(np.arange(len(views_y)), views_y)
    if shuffle:
        ids_x = ids_x[rng.permutation(ids_x.size)]
        ids_y = ids_y[rng.permutation(ids_y.size)]
    x = EmbeddingBlock(rng.normal((ids_x.size, dim)), ids_x, Modality.X)
    y = EmbeddingBlock(rng.normal((ids_y.size, dim)), ids_y, Modality.Y)
    return build_entity_batch(x, y)


def test_singleton_partition():
    b = make_batch([1, 1], [1, 1])
    assert b.entities == (0, 1)
    assert b.rows(Modality.X, 0) == (0,) and b.rows(Modality.X, 1) == (1,)
    assert b.rows(Modality.Y, 0) == (0,) and b.rows(Modality.Y, 1) == (1,)


def test_multi_view_partition_sizes():
    b = make_batch([3, 3], [5, 5])
    assert [len(b.rows(Modality.X, e)) for e in b.entities] == [3, 3]
    assert [len(b.rows(Modality.Y, e)) for e in b.entities] == [5, 5]
    assert not set(b.rows(Modality.Y, 0)) & set(b.rows(Modality.Y, 1))


def test_missing_modality_rejected():
    x = EmbeddingBlock(np.ones((2, 2)), [0, 7], Modality.X)
    y = EmbeddingBlock(np.ones((1, 2)), [0], Modality.Y)
    with pytest.raises(ValueError, match="7"):
        build_entity_batch(x, y)


def test_empty_and_mislabelled_blocks_rejected():
    with pytest.raises(ValueError):
        build_entity_batch(EmbeddingBlock(np.zeros((0, 2)), [], Modality.X),
                           EmbeddingBlock(np.ones((1, 2)), [0], Modality.Y))
    with pytest.raises(ShapeError):
        EmbeddingBlock(np.ones((2, 2)), [0], Modality.X)


def test_negative_sets_examples():
    b = make_batch([1, 1], [1, 1])
    assert negative_index_sets(b, 0) == ((0,), (1,))
    b3 = make_batch([2, 2, 2], [2, 2, 2])
    own, neg = negative_index_sets(b3, 1)
    assert len(own) == 2 and len(neg) == 4
    own_y, neg_x = negative_index_sets(b3, 1, anchor=Modality.Y)
    assert len(own_y) == 2 and set(neg_x) == {0, 1, 4, 5}


def test_negative_sets_errors():
    with pytest.raises(ValueError):
        negative_index_sets(make_batch([2], [3]), 0)
    with pytest.raises(KeyError):
        negative_index_sets(make_batch([1, 1], [1, 1]), 9)


views = st.lists(st.integers(1, 4), min_size=2, max_size=6)


@given(views, st.data())
def test_partition_and_negative_complement(vx, data):
    vy = data.draw(st.lists(st.integers(1, 4), min_size=len(vx), max_size=len(vx)))
    b = make_batch(vx, vy, shuffle=True, seed=len(vx))
    for mod, block in ((Modality.X, b.x), (Modality.Y, b.y)):
        rows = [r for e in b.entities for r in b.rows(mod, e)]
        assert sorted(rows) == list(range(block.n))
        for e in b.entities:
            assert all(block.entity_ids[r] == e for r in b.rows(mod, e))
    for e in b.entities:
        _, neg = negative_index_sets(b, e)
        assert set(neg) == set(range(b.y.n)) - set(b.rows(Modality.Y, e))


def test_build_is_deterministic():
    a, b = make_batch([2, 1, 3], [1, 2, 2], shuffle=True), make_batch([2, 1, 3], [1, 2, 2], shuffle=True)
    assert a.index_of_x == b.index_of_x and a.index_of_y == b.index_of_y


def test_labels_and_swap():
    b = make_batch([2, 1], [1, 3])
    lx, ly = b.labels()
    assert lx.tolist() == [0, 0, 1] and ly.tolist() == [0, 1, 1, 1]
    s = b.swapped()
    assert s.x is b.y and s.rows(Modality.X, 1) == b.rows(Modality.Y, 1)
