"""Workspace memory: a fixed set of learnable slots used as a scratchpad.

Chunk summaries are written into the active slots by low-rank cross
attention; tokens read from the active slots through a separate
low-rank path, gated per token by an interpolation weight in [0, 1].
At segment boundaries the active slots are pooled into carry-over
slots and the rest reset to their learned initial embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, UsageError


@dataclass
class WorkspaceParams:
    init_slots: Tensor              # [S_total, d] learned initial embeddings
    w_qw: Tensor                    # write path, [d, r] each
    w_kw: Tensor
    w_vw: Tensor
    w_ow: Tensor                    # [r, d]
    w_qr: Tensor                    # read path
    w_kr: Tensor
    w_vr: Tensor
    w_or: Tensor                    # [r, d]
    pool_queries: Tensor            # [S_active, r] segment-compression queries
    w_kp: Tensor
    w_vp: Tensor
    w_op: Tensor                    # [r, d]
    s_total: int
    s_active: int
    rank: int

    def parameters(self):
        names = ["init_slots", "w_qw", "w_kw", "w_vw", "w_ow", "w_qr", "w_kr",
                 "w_vr", "w_or", "pool_queries", "w_kp", "w_vp", "w_op"]
        return [(n, getattr(self, n)) for n in names]


@dataclass
class Workspace:
    slots: Tensor                   # [S_total, d] or [B, S_total, d]
    params: WorkspaceParams

    @property
    def active_mask(self) -> np.ndarray:
        m = np.zeros(self.params.s_total, dtype=bool)
        m[: self.params.s_active] = True
        return m


def init_workspace_params(d, s_total, s_active, rank, rng) -> WorkspaceParams:
    if s_active > s_total:
        raise UsageError("s_active must be <= s_total")
    scale = 1.0 / np.sqrt(d)
    rscale = 1.0 / np.sqrt(rank)
    mk = lambda rows, cols, s: Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=True)
    return WorkspaceParams(
        init_slots=mk(s_total, d, 1.0),
        w_qw=mk(d, rank, scale), w_kw=mk(d, rank, scale), w_vw=mk(d, rank, scale), w_ow=mk(rank, d, rscale),
        w_qr=mk(d, rank, scale), w_kr=mk(d, rank, scale), w_vr=mk(d, rank, scale), w_or=mk(rank, d, rscale),
        pool_queries=mk(s_active, rank, 1.0), w_kp=mk(d, rank, scale), w_vp=mk(d, rank, scale), w_op=mk(rank, d, rscale),
        s_total=s_total, s_active=s_active, rank=rank,
    )


def fresh_workspace(params: WorkspaceParams, batch: int | None = None) -> Workspace:
    """A workspace whose slots are the learned initial embeddings (so
    gradients reach them through every later read)."""
    if batch is None:
        return Workspace(slots=params.init_slots, params=params)
    S, d = params.init_slots.data.shape
    tiled = T.add(T.reshape(params.init_slots, (1, S, d)), Tensor(np.zeros((batch, 1, 1))))
    return Workspace(slots=tiled, params=params)


def _split_active(ws: Workspace):
    sa = ws.params.s_active
    if ws.slots.data.ndim == 2:
        return ws.slots[:sa], ws.slots[sa:]
    return ws.slots[:, :sa], ws.slots[:, sa:]


def workspace_write(chunk_summaries: Tensor, ws: Workspace) -> Workspace:
    """Additively update each active slot by attention over the summaries.

    chunk_summaries is [C, d] (or [B, C, d] matching batched slots);
    inactive slots pass through unchanged.
    """
    p = ws.params
    active, inactive = _split_active(ws)
    q = T.matmul(active, p.w_qw)                      # [.., S_a, r]
    k = T.matmul(chunk_summaries, p.w_kw)             # [.., C, r]
    v = T.matmul(chunk_summaries, p.w_vw)
    scores = T.matmul(q, T.transpose(k, _swap(k))) * (1.0 / np.sqrt(p.rank))
    upd = T.matmul(T.matmul(T.softmax(scores, axis=-1), v), p.w_ow)
    new_active = T.add(active, upd)
    axis = 0 if ws.slots.data.ndim == 2 else 1
    return Workspace(slots=T.concat([new_active, inactive], axis=axis), params=p)


def workspace_read(h: Tensor, ws: Workspace, beta: Tensor) -> Tensor:
    """out_t = h_t + beta_t * attn(h_t, active slots); beta in [0, 1]."""
    if np.any(beta.data < 0) or np.any(beta.data > 1):
        raise UsageError("workspace_read: beta must lie in [0, 1]")
    p = ws.params
    active, _ = _split_active(ws)
    q = T.matmul(h, p.w_qr)                           # [.., L, r]
    k = T.matmul(active, p.w_kr)                      # [.., S_a, r]
    v = T.matmul(active, p.w_vr)
    scores = T.matmul(q, T.transpose(k, _swap(k))) * (1.0 / np.sqrt(p.rank))
    read = T.matmul(T.matmul(T.softmax(scores, axis=-1), v), p.w_or)
    b = T.reshape(beta, beta.data.shape + (1,))
    return T.add(h, T.mul(b, read))


def compress_segment(ws: Workspace) -> Workspace:
    """Pool the active slots into carry-over slots; reset the rest."""
    p = ws.params
    active, _ = _split_active(ws)
    k = T.matmul(active, p.w_kp)
    v = T.matmul(active, p.w_vp)
    pq = p.pool_queries
    if ws.slots.data.ndim == 3:
        B = ws.slots.data.shape[0]
        pq = T.add(T.reshape(pq, (1,) + pq.data.shape), Tensor(np.zeros((B, 1, 1))))
    scores = T.matmul(pq, T.transpose(k, _swap(k))) * (1.0 / np.sqrt(p.rank))
    carry = T.matmul(T.matmul(T.softmax(scores, axis=-1), v), p.w_op)  # [.., S_a, d]
    rest = p.init_slots[p.s_active:]
    if ws.slots.data.ndim == 3:
        B = ws.slots.data.shape[0]
        rest = T.add(T.reshape(rest, (1,) + rest.data.shape), Tensor(np.zeros((B, 1, 1))))
        return Workspace(slots=T.concat([carry, rest], axis=1), params=p)
    return Workspace(slots=T.concat([carry, rest], axis=0), params=p)


def _swap(x: Tensor):
    n = x.data.ndim
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
