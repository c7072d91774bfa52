"""Synthetic task generators and the plain-text corpus loader.

Every generator is a pure function of its parameters and a seed, and
each labeled task has an independent oracle (graph reachability, table
lookup, token scan, exact arithmetic) that the test suite replays
against the emitted samples.

Sequence layouts are chunk-aligned on purpose: the supervised position
always sits in a later chunk than the content it depends on, because
the model routes each chunk by the summary of the previous one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream
from .tensor import UsageError


@dataclass
class TaskSample:
    tokens: np.ndarray
    target: int | np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class VocabSpec:
    symbols: dict[str, int]

    def __post_init__(self):
        ids = list(self.symbols.values())
        if len(set(ids)) != len(ids):
            raise UsageError("vocab mapping must be bijective")
        self.id_to_symbol = {v: k for k, v in self.symbols.items()}

    @property
    def size(self) -> int:
        return max(self.symbols.values()) + 1

    def __getitem__(self, sym: str) -> int:
        return self.symbols[sym]


def train_eval_seeds(seed: int, n_train: int, n_eval: int):
    """Disjoint per-sample seed ranges derived from one run seed."""
    if max(n_train, n_eval) >= 1 << 19:
        raise UsageError("sample count too large for disjoint seed ranges")
    base = (int(seed) % (1 << 30)) << 21
    return (
        [base + i for i in range(n_train)],
        [base + (1 << 19) + i for i in range(n_eval)],
    )


def epoch_sample_seeds(seed: int, epoch: int, n: int) -> list[int]:
    """Fresh per-epoch seeds (online training data), disjoint from the
    eval range of train_eval_seeds."""
    start = epoch * n
    if start + n >= 1 << 19:
        raise UsageError("epoch * n exceeds the train seed range")
    base = (int(seed) % (1 << 30)) << 21
    return [base + start + i for i in range(n)]


# ---------------------------------------------------------------------------
# logic chains

def logic_vocab(n_vars: int) -> VocabSpec:
    syms = {f"V{i}": i for i in range(n_vars)}
    syms.update({"->": n_vars, ";": n_vars + 1, "?": n_vars + 2})
    return VocabSpec(syms)


def gen_logic_chain(n_vars: int, chain_len: int, seed: int, n_distractors: int = 2) -> TaskSample:
    """Shuffled implication clauses plus a query for one chain's start.

    Emits "A->B; B->C; ... ? A" as 4-token clause units. Alongside the
    queried chain, n_distractors parallel chains of the same length are
    interleaved (disjoint variables), so several terminal variables
    exist and only reachability from the queried start identifies the
    answer: the task cannot be solved without following the chain.
    """
    if chain_len < 1:
        raise UsageError("chain_len must be >= 1")
    n_chains = 1 + n_distractors
    if n_vars < n_chains * (chain_len + 1) + 1:
        raise UsageError("need more variables than chain slots")
    rng = substream(seed, "task.logic")
    vocab = logic_vocab(n_vars)
    arrow, sep, query = vocab["->"], vocab[";"], vocab["?"]

    picks = rng.permutation(n_vars)
    chains = [picks[c * (chain_len + 1):(c + 1) * (chain_len + 1)] for c in range(n_chains)]
    clauses = [(ch[i], ch[i + 1]) for ch in chains for i in range(chain_len)]
    order = rng.permutation(len(clauses))
    toks = []
    for idx in order:
        a, b = clauses[idx]
        toks.extend([int(a), arrow, int(b), sep])
    chain = chains[0]  # the queried one
    toks.extend([query, int(chain[0])])
    return TaskSample(
        tokens=np.array(toks, dtype=np.int64),
        target=int(chain[-1]),
        meta={"chain_length": chain_len, "start": int(chain[0]), "n_vars": n_vars,
              "chain": tuple(int(v) for v in chain)},
    )


# ---------------------------------------------------------------------------
# uniform random tokens (throughput probes)

def gen_random_tokens(L: int, vocab: int, seed: int) -> TaskSample:
    rng = substream(seed, "task.random")
    return TaskSample(tokens=rng.integers(0, vocab, size=L).astype(np.int64),
                      target=np.empty(0, dtype=np.int64), meta={"vocab": vocab})


# ---------------------------------------------------------------------------
# open/closed-book QA over a fixed fact table

QA_N_VALUES = 64
_QA_TABLE_STREAM = "task.qa.table"


def qa_vocab(n_facts: int) -> VocabSpec:
    syms = {}
    for i in range(n_facts):
        syms[f"E{i}"] = len(syms)
    for i in range(QA_N_VALUES):
        syms[f"VAL{i}"] = len(syms)
    for tok in ("ATTR", "IS", "NOFACT", "ASK", "GO"):
        syms[tok] = len(syms)
    return VocabSpec(syms)


def qa_fact_table(n_facts: int) -> np.ndarray:
    """value id per entity; fixed for a given table size."""
    rng = substream(n_facts, _QA_TABLE_STREAM)
    return rng.integers(0, QA_N_VALUES, size=n_facts)


def gen_qa_openclosed(n_facts: int, open_book: bool, seed: int) -> TaskSample:
    """8-token QA probe.

    open:   [E, ATTR, IS, VAL | ASK, E, ATTR, GO]  -> VAL
    closed: [E, ATTR, NOFACT, NOFACT | ASK, E, ATTR, GO] -> VAL
    The first chunk reveals whether the fact is present; the answer is
    predicted at the final position.
    """
    rng = substream(seed, "task.qa")
    vocab = qa_vocab(n_facts)
    table = qa_fact_table(n_facts)
    e = int(rng.integers(0, n_facts))
    val_tok = vocab[f"VAL{int(table[e])}"]
    ent = vocab[f"E{e}"]
    if open_book:
        toks = [ent, vocab["ATTR"], vocab["IS"], val_tok,
                vocab["ASK"], ent, vocab["ATTR"], vocab["GO"]]
    else:
        toks = [ent, vocab["ATTR"], vocab["NOFACT"], vocab["NOFACT"],
                vocab["ASK"], ent, vocab["ATTR"], vocab["GO"]]
    return TaskSample(tokens=np.array(toks, dtype=np.int64), target=val_tok,
                      meta={"is_open_book": open_book, "entity": e})


# ---------------------------------------------------------------------------
# distant premise retrieval

DP_N_COLORS = 8
DP_N_DISTRACTORS = 32


def distant_premise_vocab() -> VocabSpec:
    syms = {f"D{i}": i for i in range(DP_N_DISTRACTORS)}
    for i in range(DP_N_COLORS):
        syms[f"KEY=C{i}"] = len(syms)   # premise token carrying color i
    for i in range(DP_N_COLORS):
        syms[f"C{i}"] = len(syms)       # answer tokens
    syms["?"] = len(syms)
    return VocabSpec(syms)


def gen_distant_premise(L: int, premise_pos: int, seed: int) -> TaskSample:
    """One premise token buried in uniform distractors, query at the end.

    The premise token encodes a color; the target is that color's
    answer token, recoverable by scanning for the premise token.
    """
    if not 0 <= premise_pos < L - 1:
        raise UsageError("premise_pos must lie before the query")
    rng = substream(seed, "task.distant")
    vocab = distant_premise_vocab()
    color = int(rng.integers(0, DP_N_COLORS))
    toks = rng.integers(0, DP_N_DISTRACTORS, size=L).astype(np.int64)
    toks[premise_pos] = vocab[f"KEY=C{color}"]
    toks[-1] = vocab["?"]
    return TaskSample(tokens=toks, target=vocab[f"C{color}"],
                      meta={"premise_position": premise_pos, "color": color})


# ---------------------------------------------------------------------------
# multi-domain arithmetic

MD_BASE = 10
MD_OPS = ("add", "sub", "max", "min")


def multidomain_vocab(n_domains: int) -> VocabSpec:
    syms = {}
    for d in range(n_domains):
        syms[f"DOM{d}"] = len(syms)
    for d in range(n_domains):
        for i in range(MD_BASE):
            syms[f"X{d}_{i}"] = len(syms)  # domain-local digits
    for tok in ("OP", "EQ", "PAD", "GO"):
        syms[tok] = len(syms)
    return VocabSpec(syms)


def _md_answer(domain: int, a: int, b: int) -> int:
    op = MD_OPS[domain % len(MD_OPS)]
    if op == "add":
        return (a + b) % MD_BASE
    if op == "sub":
        return (a - b) % MD_BASE
    if op == "max":
        return max(a, b)
    return min(a, b)


def gen_multidomain(n_domains: int, L: int, seed: int) -> TaskSample:
    """Domain-tagged arithmetic with disjoint digit vocabularies.

    [DOM, Xa, OP, Xb | EQ, PAD.., GO] -> X_answer (same domain's digits);
    the operation cycles add/sub/max/min (mod 10) across domains.
    """
    if not 2 <= n_domains <= 8:
        raise UsageError("n_domains must be in [2, 8]")
    if L < 6:
        raise UsageError("L must be >= 6")
    rng = substream(seed, "task.multidomain")
    vocab = multidomain_vocab(n_domains)
    d = int(rng.integers(0, n_domains))
    a, b = (int(x) for x in rng.integers(0, MD_BASE, size=2))
    ans = _md_answer(d, a, b)
    toks = [vocab[f"DOM{d}"], vocab[f"X{d}_{a}"], vocab["OP"], vocab[f"X{d}_{b}"], vocab["EQ"]]
    toks += [vocab["PAD"]] * (L - len(toks) - 1)
    toks.append(vocab["GO"])
    return TaskSample(tokens=np.array(toks, dtype=np.int64), target=vocab[f"X{d}_{ans}"],
                      meta={"domain_id": d, "a": a, "b": b})


# ---------------------------------------------------------------------------
# plain-text corpus

@dataclass
class TextCorpus:
    vocab: VocabSpec
    windows: list[TaskSample]
    n_tokens: int

    def detokenize(self, ids) -> list[str]:
        return [self.vocab.id_to_symbol[int(i)] for i in ids]


def load_text_corpus(path, context_len: int, vocab_cap: int = 8192) -> TextCorpus:
    """Whitespace-tokenize a text file into next-token training windows.

    The vocabulary keeps the vocab_cap - 1 most frequent words (ties
    alphabetical) plus an unknown marker; windows do not overlap.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    words = path.read_text(encoding="utf-8").split()
    if not words:
        raise UsageError(f"corpus file is empty: {path}")

    uniq, counts = np.unique(np.array(words), return_counts=True)
    order = np.lexsort((uniq, -counts))
    kept = [str(w) for w in uniq[order][: vocab_cap - 1]]
    syms = {"<unk>": 0}
    for w in kept:
        syms[w] = len(syms)
    vocab = VocabSpec(syms)
    ids = np.array([syms.get(w, 0) for w in words], dtype=np.int64)

    ctx = context_len
    n_windows = len(ids) // ctx
    windows = []
    for k in range(n_windows):
        toks = ids[k * ctx:(k + 1) * ctx]
        has_next = (k + 1) * ctx < len(ids)
        targets = ids[k * ctx + 1:(k + 1) * ctx + 1]
        if not has_next:
            targets = np.concatenate([targets, [0]])
        mask = np.ones(ctx, dtype=bool)
        if not has_next:
            mask[-1] = False
        windows.append(TaskSample(tokens=toks, target=targets,
                                  meta={"mask": mask, "window": k}))
    return TextCorpus(vocab=vocab, windows=windows, n_tokens=len(ids))


# ---------------------------------------------------------------------------
# line-delimited sample files (the gen-data interchange format)

def format_sample(s: TaskSample) -> str:
    toks = " ".join(str(int(t)) for t in s.tokens)
    tgt = " ".join(str(int(t)) for t in np.atleast_1d(s.target))
    meta = " ".join(f"{k}={_meta_str(v)}" for k, v in sorted(s.meta.items()))
    return f"{toks}\t{tgt}\t{meta}"


def _meta_str(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return ",".join(str(int(x)) for x in v)
    return str(v)


def parse_sample(line: str) -> TaskSample:
    toks_s, tgt_s, meta_s = line.rstrip("\n").split("\t")
    toks = np.array([int(x) for x in toks_s.split()], dtype=np.int64)
    tgt_list = [int(x) for x in tgt_s.split()]
    target = tgt_list[0] if len(tgt_list) == 1 else np.array(tgt_list, dtype=np.int64)
    meta = {}
    if meta_s:
        for kv in meta_s.split(" "):
            k, v = kv.split("=", 1)
            meta[k] = v
    return TaskSample(tokens=toks, target=target, meta=meta)


def write_samples(path, samples) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(format_sample(s) + "\n")


def read_samples(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sample file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return [parse_sample(line) for line in f if line.strip()]
