"""Numerically stable softmax attention over key blocks, expressed as
attention states, plus the lossless merge operator and rotary embedding.

An attention state is the pair (out, log_z): the attention output vector
for one query over one key/value block, and the log of the softmax mass
Z = sum_k exp(q.k / sqrt(d_h)). Storing the mass in log domain keeps long
prefixes from overflowing f32 while leaving the merge algebra exact: two
states over disjoint blocks combine into the state over the concatenated
block via mass-weighted averaging.

Inputs and outputs follow the caller's dtype (f32 or f64); accumulation is
always f64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

NEG_INF = float("-inf")


@dataclass
class AttentionState:
    """Attention output and log softmax mass for one query over one block.

    The empty block is (zero vector, -inf); it is the identity element of
    :func:`merge`.
    """

    out: np.ndarray  # [d_h], value-space units
    log_z: float

    @property
    def is_empty(self) -> bool:
        return self.log_z == NEG_INF

    @classmethod
    def empty(cls, d_h: int, dtype=np.float32) -> "AttentionState":
        return cls(out=np.zeros(d_h, dtype=dtype), log_z=NEG_INF)

    def copy(self) -> "AttentionState":
        return AttentionState(out=self.out.copy(), log_z=self.log_z)


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding parameters.

    virtual_position is the shared token index used when unifying lookup
    keys to a common rotation.
    """

    theta_base: float = 10000.0
    virtual_position: int = 0

    def __post_init__(self) -> None:
        if self.theta_base <= 0:
            raise ValueError("theta_base must be > 0")
        if self.virtual_position < 0:
            raise ValueError("virtual_position must be >= 0")


def attn_with_state(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> AttentionState:
    """Softmax attention of one query over a key/value block.

    out = softmax(q K^T / sqrt(d_h)) V and log_z = logsumexp(q K^T / sqrt(d_h)),
    both via max-subtraction so scores of any magnitude stay finite. An empty
    block (n = 0) yields the empty state.
    """
    q = np.asarray(q)
    keys = np.asarray(keys)
    values = np.asarray(values)
    if q.ndim != 1:
        raise ValueError(f"q must be 1-D, got shape {q.shape}")
    if keys.ndim != 2 or values.ndim != 2:
        raise ValueError("keys and values must be 2-D [n, d]")
    if keys.shape[0] != values.shape[0]:
        raise ValueError(
            f"keys ({keys.shape[0]}) and values ({values.shape[0]}) row counts differ"
        )
    if keys.shape[1] != q.shape[0]:
        raise ValueError(f"q dim {q.shape[0]} != key dim {keys.shape[1]}")
    out_dtype = np.result_type(q, keys, values)
    if keys.shape[0] == 0:
        return AttentionState.empty(values.shape[1] if values.size else q.shape[0], out_dtype)
    if not (np.isfinite(q).all() and np.isfinite(keys).all() and np.isfinite(values).all()):
        raise ValueError("non-finite input")

    scores = keys.astype(np.float64) @ q.astype(np.float64)
    scores /= math.sqrt(q.shape[0])
    m = float(scores.max())
    w = np.exp(scores - m)
    z = float(w.sum())
    out = (w @ values.astype(np.float64)) / z
    return AttentionState(out=out.astype(out_dtype), log_z=m + math.log(z))


def merge(s1: AttentionState, s2: AttentionState) -> AttentionState:
    """Combine two attention states over disjoint blocks of the same query.

    Z = Z1 + Z2 and out = (Z1 out1 + Z2 out2) / (Z1 + Z2), computed in log
    domain: log_z = logaddexp(log_z1, log_z2) and convex weights
    w_i = exp(log_z_i - log_z). Merging with the empty state returns the
    other state bit-exactly.
    """
    if s1.out.shape != s2.out.shape:
        raise ValueError(f"state dims differ: {s1.out.shape} vs {s2.out.shape}")
    if s2.is_empty:
        return s1.copy()
    if s1.is_empty:
        return s2.copy()
    log_z = float(np.logaddexp(s1.log_z, s2.log_z))
    w1 = math.exp(s1.log_z - log_z)
    w2 = math.exp(s2.log_z - log_z)
    out = w1 * s1.out.astype(np.float64) + w2 * s2.out.astype(np.float64)
    return AttentionState(out=out.astype(np.result_type(s1.out, s2.out)), log_z=log_z)


def decompose_check(
    q: np.ndarray, blocks: list[tuple[np.ndarray, np.ndarray]]
) -> tuple[AttentionState, AttentionState, float]:
    """Fold per-block states with merge and compare against attention over
    the concatenated block.

    Returns (merged, full, max_rel_err) where max_rel_err is the larger of
    the max-norm relative error on the output vector and the absolute error
    on log_z.
    """
    if not blocks:
        raise ValueError("at least one block required")
    states = [attn_with_state(q, k, v) for k, v in blocks]
    merged = reduce(merge, states)
    full = attn_with_state(
        q,
        np.concatenate([k for k, _ in blocks], axis=0),
        np.concatenate([v for _, v in blocks], axis=0),
    )
    scale = max(float(np.abs(full.out).max()), np.finfo(np.float64).tiny)
    a_err = float(np.abs(merged.out.astype(np.float64) - full.out.astype(np.float64)).max()) / scale
    z_err = abs(merged.log_z - full.log_z)
    return merged, full, max(a_err, z_err)


def apply_rope(x: np.ndarray, position: int, cfg: RopeConfig | None = None) -> np.ndarray:
    """Rotate consecutive coordinate pairs of the last axis by the standard
    rotary-embedding angles position * theta_base^(-2i/d_h).

    Works on any leading shape (heads broadcast); norm-preserving. d_h must
    be even. position = 0 returns the input values exactly.
    """
    if cfg is None:
        cfg = RopeConfig()
    x = np.asarray(x)
    d_h = x.shape[-1]
    if d_h % 2 != 0:
        raise ValueError(f"last dim must be even for rotary pairs, got {d_h}")
    half = np.arange(d_h // 2, dtype=np.float64)
    angles = position * cfg.theta_base ** (-2.0 * half / d_h)
    cos = np.cos(angles)
    sin = np.sin(angles)
    x64 = x.astype(np.float64)
    even = x64[..., 0::2]
    odd = x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(x.dtype)
