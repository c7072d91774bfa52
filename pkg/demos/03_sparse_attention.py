"""Sparse global attention: window + selected globals vs dense cost.

Run:  python demos/03_sparse_attention.py
"""

import time

import numpy as np

from hydra_lab.attention import (
    GlobalTokenSet,
    init_sga_params,
    select_globals,
    sga_cost,
    sga_forward,
)
from hydra_lab.tensor import Tensor, no_grad

rng = np.random.default_rng(0)
d = 64

# A salient token far outside the local window is still reachable once
# it is selected as a global token.
params = init_sga_params(d=d, n_heads=4, window=8, max_globals=4, rng=rng)
h = rng.normal(size=(256, d))
h[40] += 3.0  # make position 40 salient
globals_ = select_globals(h, params.saliency_proj, K=4)
print("selected global positions:", globals_.indices.tolist())

with no_grad():
    with_g = sga_forward(Tensor(h), params, globals_)
    without = sga_forward(Tensor(h), params, GlobalTokenSet(np.empty(0, int), np.empty(0)))
delta = np.abs(with_g.data[-1] - without.data[-1]).max()
print(f"effect of globals on the final token: {delta:.3e}")

# With the window covering everything, the sparse kernel IS dense
# causal attention; at fixed window the cost model stays linear in L.
print("\n  L     sparse flops   dense flops   ratio")
for L in (1024, 4096, 16384):
    sp = sga_cost(L, w=64, g=16, d=d)
    dn = sga_cost(L, w=L, g=0, d=d)
    print(f"{L:>6}  {sp:12,.0f}  {dn:12,.0f}  {dn/sp:7.1f}x")

# measured: same layer, growing L, fixed window
params = init_sga_params(d=d, n_heads=4, window=64, max_globals=16, rng=rng)
print("\n  L      seconds")
for L in (2048, 4096, 8192, 16384):
    hL = Tensor(rng.normal(size=(L, d)))
    with no_grad():
        sga_forward(hL, params, "causal")
        t0 = time.perf_counter()
        sga_forward(hL, params, "causal")
        print(f"{L:>6}  {time.perf_counter() - t0:8.4f}")
