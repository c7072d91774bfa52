"""Optimizers, losses, the staged-activation curriculum, and the
experiment protocols.

Each experiment trains one arm (a model kind plus optional ablations)
under a fixed scaled protocol, logs one report row per epoch, and ends
with an evaluation pass that fills a summary dict. The auxiliary
objectives follow the architecture: a Switch-style balance term on the
expert router whenever a mixture is live, and an optional mean-gate
penalty on the memory interpolation weights so retrieval only stays
open where it pays for itself.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_hydra, build_transformer, hydra_forward, transformer_forward
from .moe import load_balance_loss
from .rng import substream
from .tasks import (
    TaskSample,
    gen_distant_premise,
    gen_logic_chain,
    gen_multidomain,
    gen_qa_openclosed,
    distant_premise_vocab,
    load_text_corpus,
    logic_vocab,
    multidomain_vocab,
    qa_vocab,
    train_eval_seeds,
)
from .tensor import Tensor, UsageError, backward, no_grad

EXPERIMENTS = ("logic", "efficiency", "wikitext", "pkm_recall", "distant_premise", "moe_dense")


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0   # 0 -> Adam; >0 -> AdamW (decoupled)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: OptimState, frozen: set | None = None):
    """One bias-corrected Adam/AdamW update over (name, tensor) pairs.

    Parameters without a gradient are skipped; a NaN gradient aborts
    with the offending parameter's name.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        if frozen and name in frozen:
            continue
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise T.NumericError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        denom = np.empty_like(v)
        np.sqrt(v, out=denom)
        denom *= 1.0 / np.sqrt(c2)
        denom += state.eps
        update = np.divide(m, denom, out=denom)
        update *= state.lr / c1
        if state.weight_decay:
            update += (state.lr * state.weight_decay) * p.data
        p.data -= update


def zero_grads(named_params):
    for _, p in named_params:
        p.grad = None


# ---------------------------------------------------------------------------
# loss

def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions (perplexity = exp)."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    n = float(mask.sum())
    if n == 0:
        raise UsageError("lm_loss: mask selects no positions")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take_along_last(logp, targets[..., None])
    picked = T.reshape(picked, targets.shape)
    return T.tsum(T.mul(picked, Tensor(mask.astype(float)))) * (-1.0 / n)


def perplexity(loss_value: float) -> float:
    return float(np.exp(loss_value))


# ---------------------------------------------------------------------------
# curriculum (staged component activation)

@dataclass
class CurriculumSchedule:
    """Half-open step boundaries for phases A | B | C | D."""
    phase_a_end: int
    phase_b_end: int
    phase_c_end: int
    tau_start: float = 0.9
    tau_final: float = 0.5

    def __post_init__(self):
        if not 0 <= self.phase_a_end <= self.phase_b_end <= self.phase_c_end:
            raise UsageError("curriculum phases must be contiguous and ordered")


@dataclass
class PhaseFlags:
    phase: str
    ablate: frozenset      # components hard-off at this step
    tau: float
    balance_weight: float


def curriculum_step(schedule: CurriculumSchedule, step: int) -> PhaseFlags:
    """Component enablement at a step; boundary steps join the later phase."""
    if step < schedule.phase_a_end:
        return PhaseFlags("A", frozenset({"sga", "moe", "workspace", "pkm"}),
                          tau=1.0, balance_weight=0.0)
    if step < schedule.phase_b_end:
        span = max(1, schedule.phase_b_end - schedule.phase_a_end)
        frac = (step - schedule.phase_a_end) / span
        tau = schedule.tau_start + frac * (schedule.tau_final - schedule.tau_start)
        return PhaseFlags("B", frozenset({"moe", "workspace", "pkm"}),
                          tau=float(tau), balance_weight=0.0)
    if step < schedule.phase_c_end:
        return PhaseFlags("C", frozenset({"workspace", "pkm"}),
                          tau=schedule.tau_final, balance_weight=0.01)
    return PhaseFlags("D", frozenset(), tau=schedule.tau_final, balance_weight=0.01)


def param_phase(name: str) -> str:
    """Earliest curriculum phase at which a parameter unfreezes."""
    if ".sga." in name or name.endswith("gates.g2") or name == "router.w_sga":
        return "B"
    if ".moe." in name or name.endswith("gates.g3") or name == "router.w_moe":
        return "C"
    if name.startswith(("workspace.", "pkm.")) or name.startswith("router.w_mem"):
        return "D"
    return "A"


def frozen_for_phase(named_params, phase: str) -> set:
    order = "ABCD"
    cutoff = order.index(phase)
    return {n for n, _ in named_params if order.index(param_phase(n)) > cutoff}


# ---------------------------------------------------------------------------
# reports

TRAIN_REPORT_COLUMNS = [
    "epoch", "loss", "accuracy", "balance_loss", "gate_loss",
    "mean_p_sga", "mean_beta_ws", "mean_beta_pkm", "expert_entropy",
    "expert_histogram", "seed", "wall_time_s",
]


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append({c: kw.get(c, "") for c in TRAIN_REPORT_COLUMNS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TRAIN_REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class RunRecord:
    task: str
    variant: str
    seed: int
    metric: str
    value: float


def write_run_records(path, records):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "variant", "seed", "metric", "value"])
        for r in records:
            w.writerow([r.task, r.variant, r.seed, r.metric, repr(r.value)])


# ---------------------------------------------------------------------------
# generic training loop

@dataclass
class TrainSettings:
    epochs: int
    batch_size: int
    lr: float = 1e-3
    weight_decay: float = 0.0
    balance_weight: float = 0.01
    gate_penalty: float = 0.0
    explore_sga: bool = False
    curriculum: CurriculumSchedule | None = None
    log_every_epoch: bool = True


def _forward(kind, tokens, config, params, **kw):
    if kind == "hydra":
        return hydra_forward(tokens, config, params, **kw)
    kw.pop("ablate", None)
    kw.pop("explore_rng", None)
    return transformer_forward(tokens, config, params, **kw)


def _answer_targets(batch: list[TaskSample], L: int):
    """Supervision targets: full next-token sequences when samples carry
    them, otherwise only the final position (answer-only tasks)."""
    B = len(batch)
    first = np.atleast_1d(batch[0].target)
    if first.size > 1:
        targets = np.stack([np.asarray(s.target, dtype=np.int64) for s in batch])
        if "mask" in batch[0].meta:
            mask = np.stack([np.asarray(s.meta["mask"], dtype=bool) for s in batch])
        else:
            mask = np.ones((B, L), dtype=bool)
        return targets, mask
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, s in enumerate(batch):
        targets[i, -1] = int(s.target)
        mask[i, -1] = True
    return targets, mask


def _entropy(hist: np.ndarray) -> float:
    p = hist[hist > 0]
    return float(-(p * np.log2(p)).sum()) if p.size else 0.0


def train_model(kind: str, config: ModelConfig, params, train_samples, eval_samples,
                settings: TrainSettings, seed: int, ablate=frozenset(),
                eval_fn=None, report: TrainReport | None = None, resample_fn=None):
    """Train one arm; returns the report. ``eval_fn(params) -> accuracy``
    defaults to final-position argmax accuracy on eval_samples.
    ``resample_fn(epoch)``, when given, regenerates the training set at
    each epoch start (the online regime for synthetic tasks)."""
    ablate = frozenset(ablate)
    named = params.parameters()
    state = OptimState(lr=settings.lr, weight_decay=settings.weight_decay)
    shuffle_rng = substream(seed, "train.shuffle")
    explore_rng = substream(seed, "train.explore") if settings.explore_sga else None
    report = report if report is not None else TrainReport()
    has_moe = kind == "hydra" and "moe" not in ablate and len(config.moe_block_ids()) > 0
    step = 0
    frozen_static = {n for n, _ in named if ablate and any(
        a in n for a in ({"workspace": "workspace.", "pkm": "pkm.", "sga": ".sga.", "moe": ".moe."}[x] for x in ablate))}

    if eval_fn is None:
        def eval_fn(prm):
            return evaluate_accuracy(kind, config, prm, eval_samples, ablate)

    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        if resample_fn is not None:
            train_samples = resample_fn(epoch)
        order = shuffle_rng.permutation(len(train_samples))
        ep_loss = ep_bal = ep_gate = 0.0
        gate_stats = np.zeros(3)
        hist = np.zeros(config.n_experts)
        n_batches = 0
        for s0 in range(0, len(order), settings.batch_size):
            batch = [train_samples[i] for i in order[s0:s0 + settings.batch_size]]
            toks = np.stack([s.tokens for s in batch])
            targets, mask = _answer_targets(batch, toks.shape[1])

            flags = None
            ab = ablate
            tau = config.sga_threshold
            bal_w = settings.balance_weight if has_moe else 0.0
            if settings.curriculum is not None:
                flags = curriculum_step(settings.curriculum, step)
                ab = ablate | flags.ablate
                tau = flags.tau
                bal_w = flags.balance_weight if has_moe else 0.0

            stats = {}
            cfg = config if tau == config.sga_threshold else _with_tau(config, tau)
            logits = _forward(kind, toks, cfg, params, train_mode=True, ablate=ab,
                              stats=stats, explore_rng=explore_rng)
            loss = lm_loss(logits, targets, mask)
            if kind == "hydra" and bal_w and "moe" not in ab:
                dec = stats["decision"]
                E = config.n_experts
                dist = T.reshape(dec.full_distribution, (-1, E))
                counts = np.bincount(dec.expert_ids.reshape(-1), minlength=E).astype(float)
                bal = load_balance_loss(dist, counts / counts.sum())
                loss = T.add(loss, T.mul(bal, bal_w))
                ep_bal += bal.item()
            if kind == "hydra" and settings.gate_penalty and ("pkm" not in ab or "workspace" not in ab):
                dec = stats["decision"]
                gate = T.add(T.tmean(dec.beta_pkm), T.tmean(dec.beta_ws))
                loss = T.add(loss, T.mul(gate, settings.gate_penalty))
                ep_gate += gate.item()

            ep_loss += loss.item()
            backward(loss)
            frozen = set(frozen_static)
            if flags is not None:
                frozen |= frozen_for_phase(named, flags.phase)
            adam_step(named, state, frozen=frozen)
            zero_grads(named)

            if kind == "hydra":
                gate_stats += [stats.get("mean_p_sga", 0.0), stats.get("mean_beta_ws", 0.0),
                               stats.get("mean_beta_pkm", 0.0)]
                hist += stats.get("expert_histogram", np.zeros(config.n_experts))
            n_batches += 1
            step += 1

        acc = eval_fn(params) if settings.log_every_epoch or epoch == settings.epochs - 1 else ""
        hist_norm = hist / max(hist.sum(), 1.0)
        report.add(
            epoch=epoch, loss=ep_loss / max(n_batches, 1), accuracy=acc,
            balance_loss=ep_bal / max(n_batches, 1), gate_loss=ep_gate / max(n_batches, 1),
            mean_p_sga=gate_stats[0] / max(n_batches, 1),
            mean_beta_ws=gate_stats[1] / max(n_batches, 1),
            mean_beta_pkm=gate_stats[2] / max(n_batches, 1),
            expert_entropy=_entropy(hist_norm),
            expert_histogram=";".join(f"{x:.4f}" for x in hist_norm),
            seed=seed, wall_time_s=round(time.perf_counter() - t0, 3),
        )
    return report


def _with_tau(config: ModelConfig, tau: float) -> ModelConfig:
    d = config.to_dict()
    d["sga_threshold"] = tau
    return ModelConfig.from_dict(d)


def evaluate_accuracy(kind, config, params, samples, ablate=frozenset(),
                      batch_size=32, collect=None):
    """Final-position argmax accuracy; optionally collects gate stats."""
    if not samples:
        return 0.0
    hits = 0
    for s0 in range(0, len(samples), batch_size):
        batch = samples[s0:s0 + batch_size]
        toks = np.stack([s.tokens for s in batch])
        stats = {}
        with no_grad():
            logits = _forward(kind, toks, config, params, ablate=ablate, stats=stats)
        pred = logits.data[:, -1, :].argmax(axis=-1)
        for i, s in enumerate(batch):
            hits += int(pred[i] == int(s.target))
        if collect is not None and kind == "hydra":
            dec = stats["decision"]
            top_slot = dec.expert_weights.data[:, -1, :].argmax(axis=-1)
            for i, s in enumerate(batch):
                collect.append({
                    "sample": s,
                    "beta_pkm_final": float(dec.beta_pkm.data[i, -1]),
                    "beta_ws_final": float(dec.beta_ws.data[i, -1]),
                    "expert_ids_final": dec.expert_ids[i, -1].tolist(),
                    "top_expert_final": int(dec.expert_ids[i, -1, top_slot[i]]),
                })
    return hits / len(samples)
