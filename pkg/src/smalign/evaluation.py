"""Retrieval recall, modality-gap metrics and prototype classification.

``heads`` is an ``(x_head, y_head)`` pair or ``None`` when the blocks are
already in the shared space. Recall and accuracy are percentages.
"""

from __future__ import annotations

import numpy as np

from .sets import EmbeddingBlock
from .tensor import ACCUM, matmul, row_l2_normalize


def _project(heads, x: EmbeddingBlock, y: EmbeddingBlock):
    if heads is None:
        px, py = x.matrix, y.matrix
    else:
        px, py = heads[0].forward(x.matrix), heads[1].forward(y.matrix)
    return np.asarray(row_l2_normalize(px), dtype=ACCUM), np.asarray(row_l2_normalize(py), dtype=ACCUM)


def _recall(sim: np.ndarray, q_ids: np.ndarray, g_ids: np.ndarray, ks) -> dict[int, float]:
    # stable sort keeps gallery order on ties
    ranked = np.argsort(-sim, axis=1, kind="stable")
    hits = g_ids[ranked] == q_ids[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), sim.shape[1])
    return {int(k): float(100.0 * np.mean(first < k)) for k in ks}


def eval_retrieval(heads, x: EmbeddingBlock, y: EmbeddingBlock, ks=(1, 5)) -> dict[str, dict[int, float]]:
    """Recall@k in both directions; a hit is any view of the query's entity in the top k."""
    if x.n == 0 or y.n == 0:
        raise ValueError("retrieval needs nonempty query and gallery blocks")
    for k in ks:
        if k < 1 or k > y.n or k > x.n:
            raise ValueError(f"k={k} is outside the gallery size ({x.n} X rows, {y.n} Y rows)")
    px, py = _project(heads, x, y)
    sim = matmul(px, py.T)
    return {
        "i2t": _recall(sim, x.entity_ids, y.entity_ids, ks),
        "t2i": _recall(sim.T, y.entity_ids, x.entity_ids, ks),
    }


def eval_modality_gap(heads, x: EmbeddingBlock, y: EmbeddingBlock) -> tuple[float, float]:
    """``(centroid_gap, mean_pair_gap)`` of the projected, normalised embeddings.

    The centroid gap is ``||mean(X) - mean(Y)||``; the pair gap averages
    ``||x - y||`` over every (x-view, y-view) pair of the same entity.
    """
    if x.n == 0 or y.n == 0:
        raise ValueError("modality gap needs both modalities")
    px, py = _project(heads, x, y)
    centroid = float(np.linalg.norm(px.mean(axis=0) - py.mean(axis=0)))
    total, count = 0.0, 0
    y_ids = y.entity_ids
    for e in sorted(set(x.entity_ids.tolist())):
        xs = px[x.entity_ids == e]
        ys = py[y_ids == e]
        if ys.shape[0] == 0:
            continue
        d = np.sqrt(((xs[:, None, :] - ys[None, :, :]) ** 2).sum(axis=2))
        total += float(d.sum())
        count += d.size
    pair = total / count if count else float("nan")
    return centroid, pair


def eval_prototype_classification(heads, x: EmbeddingBlock, y: EmbeddingBlock, class_map=None) -> float:
    """Nearest-prototype accuracy of X views against per-class mean Y embeddings.

    ``class_map`` maps entity id -> class label; by default each entity is
    its own class.
    """
    ids_x = x.entity_ids.tolist()
    ids_y = y.entity_ids.tolist()
    if class_map is None:
        class_map = {e: e for e in set(ids_x) | set(ids_y)}
    px, py = _project(heads, x, y)
    classes = sorted(set(class_map.values()), key=str)
    y_cls = np.array([classes.index(class_map[e]) if e in class_map else -1 for e in ids_y])
    protos = []
    for c in range(len(classes)):
        rows = py[y_cls == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {classes[c]!r} has no Y views")
        protos.append(rows.mean(axis=0))
    protos = row_l2_normalize(np.array(protos))
    known = [i for i, e in enumerate(ids_x) if e in class_map]
    if not known:
        raise ValueError("no X view belongs to a mapped class")
    truth = np.array([classes.index(class_map[ids_x[i]]) for i in known])
    pred = np.argmax(matmul(px[known], protos.T), axis=1)
    return float(100.0 * np.mean(pred == truth))
