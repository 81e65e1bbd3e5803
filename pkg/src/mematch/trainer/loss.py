from __future__ import annotations

import numpy as np

from .. import numcore as nc
from ..numcore import ShapeError, Tensor


def episode_loss(logits, support_labels, query_labels, average_matches: bool = False) -> Tensor:
    """Episodic softmax loss.

    For every query, sums -log softmax(logits_row)[n] over all support
    samples n that share the query's label (so k terms per query in a
    k-shot episode). ``average_matches`` divides each query's sum by its
    number of matching support samples instead.
    """
    logits = nc.as_tensor(logits)
    s = np.asarray(support_labels)
    q = np.asarray(query_labels)
    if logits.ndim != 2 or logits.shape != (len(q), len(s)):
        raise ShapeError(f"logits {logits.shape} do not match {len(q)} queries x {len(s)} support samples")
    mask = (q[:, None] == s[None, :]).astype(logits.dtype)
    if average_matches:
        mask = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    return nc.mul(nc.sum(nc.log_softmax(logits, axis=1) * mask), -1.0)


def predict_label(row, support_labels, per_class: bool = False) -> int:
    """Label of the best-matching support sample (first index on ties).

    With ``per_class`` the row is summed per label and the best label wins.
    """
    row = np.asarray(row.data if isinstance(row, Tensor) else row)
    labels = np.asarray(support_labels)
    if row.size == 0:
        raise ShapeError("cannot predict from an empty row")
    if per_class:
        classes = np.unique(labels)
        sums = np.array([row[labels == c].sum() for c in classes])
        return int(classes[int(np.argmax(sums))])
    return int(labels[int(np.argmax(row))])


def predict_labels(logits, support_labels, per_class: bool = False) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.array([predict_label(r, support_labels, per_class) for r in data], dtype=np.int64)
