"""Chunk-level Top-2 mixture of experts.

Contiguous token chunks share one routing decision. Each chunk runs
exactly two experts, weighted by the pair-renormalized router softmax,
so per-token compute is independent of the pool size. A Switch-style
auxiliary loss discourages the router from collapsing onto one expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, UsageError


@dataclass
class ExpertFfn:
    """Two-layer SiLU-gated feed-forward: (silu(x Wg) * x Wi) Wo."""
    w_gate: Tensor  # [d, h]
    w_in: Tensor    # [d, h]
    w_out: Tensor   # [h, d]

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(T.mul(T.silu(T.matmul(x, self.w_gate)), T.matmul(x, self.w_in)), self.w_out)

    def parameters(self):
        return [("w_gate", self.w_gate), ("w_in", self.w_in), ("w_out", self.w_out)]


@dataclass
class ExpertPool:
    n_experts: int
    experts: list[ExpertFfn]
    chunk_size: int

    def __post_init__(self):
        if self.chunk_size < 1:
            raise UsageError("chunk_size must be >= 1")
        shapes = {tuple(e.w_in.data.shape) for e in self.experts}
        if len(shapes) > 1:
            raise UsageError("all experts must be identically shaped")

    def parameters(self):
        out = []
        for i, e in enumerate(self.experts):
            out.extend((f"expert{i}.{n}", p) for n, p in e.parameters())
        return out


@dataclass
class MoeRouting:
    expert_ids: np.ndarray        # 2 distinct indices, argmax-2 of the distribution
    weights: Tensor               # [2] pair-renormalized masses, sum to 1
    full_distribution: Tensor     # [E] router softmax


def init_expert_pool(d, hidden, n_experts, chunk_size, rng) -> ExpertPool:
    scale = 1.0 / np.sqrt(d)
    out_scale = 1.0 / np.sqrt(hidden)
    experts = [
        ExpertFfn(
            w_gate=Tensor(rng.normal(0.0, scale, size=(d, hidden)), requires_grad=True),
            w_in=Tensor(rng.normal(0.0, scale, size=(d, hidden)), requires_grad=True),
            w_out=Tensor(rng.normal(0.0, out_scale, size=(hidden, d)), requires_grad=True),
        )
        for _ in range(n_experts)
    ]
    return ExpertPool(n_experts=n_experts, experts=experts, chunk_size=chunk_size)


def chunk_spans(L: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_size, L)) for s in range(0, L, chunk_size)]


def route_chunk(r_c: Tensor, w_moe: Tensor, k: int = 2) -> MoeRouting:
    """Top-k routing from one chunk summary; ties break to lower index."""
    E = w_moe.data.shape[0]
    if k > E:
        raise UsageError("route_chunk: k must be <= number of experts")
    logits = T.reshape(T.matmul(w_moe, T.reshape(r_c, (r_c.data.shape[0], 1))), (E,))
    full = T.softmax(logits, axis=-1)
    ids = np.sort(np.argsort(-full.data, kind="stable")[:k])
    # renormalized masses over the chosen pair == softmax of their logits
    weights = T.softmax(T.gather_rows(logits, ids), axis=-1)
    return MoeRouting(expert_ids=ids, weights=weights, full_distribution=full)


def scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Inverse of gather_rows: accumulate value rows at idx into [n_rows, d]."""
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + values.data.shape[1:])
    np.add.at(out, idx, values.data)

    def bwd(g):
        return (g[idx],)

    return T._make_output(out, (values,), bwd, "scatter_rows")


def moe_forward(x: Tensor, pool: ExpertPool, routings: list[MoeRouting]) -> Tensor:
    """Apply each chunk's two experts, weighted; only selected experts run.

    x is [L, d]; routings has one entry per chunk of pool.chunk_size
    tokens (last chunk may be short).
    """
    L = x.data.shape[0]
    spans = chunk_spans(L, pool.chunk_size)
    if len(spans) != len(routings):
        raise UsageError(f"moe_forward: {len(spans)} chunks but {len(routings)} routings")

    parts = []
    for e in range(pool.n_experts):
        tok_idx = []
        w_chunk = []
        chunk_of_token = []
        for c, (s, t) in enumerate(spans):
            for slot in range(len(routings[c].expert_ids)):
                if routings[c].expert_ids[slot] == e:
                    tok_idx.append(np.arange(s, t))
                    chunk_of_token.append(np.full(t - s, len(w_chunk)))
                    w_chunk.append(routings[c].weights[slot:slot + 1])
        if not tok_idx:
            continue
        idx = np.concatenate(tok_idx)
        wvec = T.reshape(T.concat(w_chunk, axis=0), (len(w_chunk), 1))
        tok_w = T.gather_rows(wvec, np.concatenate(chunk_of_token))  # [n_e, 1]
        y = T.mul(pool.experts[e](T.gather_rows(x, idx)), tok_w)
        parts.append(scatter_rows(y, idx, L))
    if not parts:
        raise UsageError("moe_forward: no expert received any chunk")
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return out


def dispatch_fractions(routings: list[MoeRouting], n_experts: int) -> np.ndarray:
    """Fraction of chunk-assignments routed to each expert."""
    counts = np.zeros(n_experts)
    total = 0
    for r in routings:
        for e in r.expert_ids:
            counts[e] += 1
            total += 1
    return counts / max(total, 1)


def load_balance_loss(all_distributions: Tensor, fractions_dispatched: np.ndarray) -> Tensor:
    """Switch-style balance objective: E * sum_e meanprob_e * dispatched_e.

    Equals 1 under perfectly uniform routing and grows as routing
    concentrates; only the mean probabilities carry gradient.
    """
    C, E = all_distributions.data.shape
    if C < 1:
        raise UsageError("load_balance_loss: need at least one chunk")
    mean_probs = T.tmean(all_distributions, axis=0)
    return T.tsum(T.mul(mean_probs, Tensor(np.asarray(fractions_dispatched)))) * float(E)
