import numpy as np
import pytest

from attnmem.tensorstore import ModelGeometry


def brute_softmax_attention(q, keys, values):
    """Independent f64 oracle: plain softmax attention, no state machinery."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    scores = keys @ q / np.sqrt(q.shape[0])
    shifted = np.exp(scores - scores.max())
    weights = shifted / shifted.sum()
    out = weights @ values
    log_z = scores.max() + np.log(shifted.sum())
    return out, log_z


def match_labels(pred, truth):
    """Best-permutation agreement rate between two labelings."""
    from scipy.optimize import linear_sum_assignment

    pred = np.asarray(pred)
    truth = np.asarray(truth)
    n_pred = pred.max() + 1
    n_true = truth.max() + 1
    contingency = np.zeros((n_pred, n_true), dtype=np.int64)
    for p, t in zip(pred, truth):
        contingency[p, t] += 1
    rows, cols = linear_sum_assignment(-contingency)
    return contingency[rows, cols].sum() / len(pred)


@pytest.fixture
def small_geometry():
    return ModelGeometry(n_layers=2, h_q=4, h_kv=2, d_h=8)
