"""The assembled hybrid next to its dense baseline: parameter match,
router decisions, and the analytic cost model.

Run:  python demos/05_full_model.py
"""

import numpy as np

from hydra_lab.model import (
    ActiveDecisions,
    ModelConfig,
    build_hydra,
    build_transformer,
    cost_model,
    count_params,
    hydra_forward,
    predicted_crossover,
    transformer_forward,
)
from hydra_lab.tensor import no_grad

cfg = ModelConfig(vocab=256, max_len=4096)
hydra = build_hydra(cfg)
dense = build_transformer(cfg)
nh, nt = count_params(hydra.parameters()), count_params(dense.parameters())
print(f"hybrid params: {nh:,}   baseline params: {nt:,}   gap: {abs(nh-nt)/nt:.2%}")
print(f"(baseline FFN width solved for the match: {dense.ffn_hidden})")

toks = np.random.default_rng(0).integers(0, 256, size=512)
stats = {}
with no_grad():
    logits_h = hydra_forward(toks, cfg, hydra, stats=stats)
    logits_t = transformer_forward(toks, cfg, dense)
print(f"\nlogits: hybrid {logits_h.data.shape}, baseline {logits_t.data.shape}")
print(f"router: sga on-rate {stats['sga_on_rate']:.2f}, "
      f"mean workspace gate {stats['mean_beta_ws']:.2f}, "
      f"mean retrieval gate {stats['mean_beta_pkm']:.2f}")
print("expert dispatch:", np.round(stats["expert_histogram"], 3))

print("\nanalytic cost (flop-equivalents), all components live:")
print(f"{'L':>7} {'hybrid':>14} {'baseline':>14} {'ratio':>7}")
for L in (1024, 4096, 16384):
    c = cost_model(cfg, L)
    print(f"{L:>7} {c['total']:>14,.0f} {c['baseline_total']:>14,.0f} "
          f"{c['baseline_total']/c['total']:>6.2f}x")

c0 = cost_model(cfg, 4096, ActiveDecisions.all_off())
print(f"\nwith every gate off the model reduces to the recurrent term: "
      f"{c0['total'] == c0['ssm']}")
print("predicted throughput crossover near L =", predicted_crossover(cfg))
