# %% [markdown]
# The three MLP initializations side by side. A constant shift moves the
# grand mean of W1; a random row vector leaves the grand mean at zero but
# makes every column share an offset, which shows up as stripes once you
# look across many independently initialized networks.

# %%
import numpy as np

from mimetic_mlp.init_schemes import (
    InitSpec,
    apply_anticorrelated,
    apply_constant_mean,
    apply_rowvec_mean,
    base_init,
)
from mimetic_mlp.population import PopulationMatrix, all_stripe_scores

p, n = 32, 16
rng = np.random.default_rng(1)
W1 = base_init((p, n), InitSpec(), rng)
W2 = base_init((n, p), InitSpec(), rng, fan_in=p)

# %% constant shift: grand mean moves by exactly b
shifted = apply_constant_mean(W1, 0.02)
print("grand mean before/after:", W1.mean(), shifted.mean())

# %% row-vector shift: column means pick up b_n, grand mean stays near 0
striped = apply_rowvec_mean(W1, 0.1, rng)
print("column-mean offsets:", np.round((striped - W1).mean(axis=0)[:6], 3))
print("grand mean:", striped.mean())

# %% anticorrelated variant
anti = apply_anticorrelated(W1, W2)
print("corr(W1', W2^T):", np.corrcoef(anti.ravel(), W2.T.ravel())[0, 1])

# %% stripe scores over a population of 256 fresh initializations
K = 256
plain = np.stack([base_init((p, n), InitSpec(), rng) for _ in range(K)])
rowvec = np.stack([apply_rowvec_mean(base_init((p, n), InitSpec(), rng), 0.1, rng) for _ in range(K)])
dummy_W2 = np.stack([base_init((n, p), InitSpec(), rng, fan_in=p) for _ in range(K)])
for name, pop in [("kaiming", plain), ("kaiming + rowvec", rowvec)]:
    scores = all_stripe_scores(PopulationMatrix(0, pop, dummy_W2))["W1"]
    print(f"{name:18s} rows {scores['rows']:.2f}  columns {scores['columns']:.2f}")
