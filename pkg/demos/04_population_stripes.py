# %% [markdown]
# A miniature version of the population study: farm a few dozen tiny models,
# then measure how striped the MLP weights are across the population.
# Takes a few minutes on one core; raise K for cleaner numbers.

# %%
import tempfile
from pathlib import Path

from mimetic_mlp.experiments import ExperimentConfig, run_analyze, run_farm, stripes_found

K = 24
cfg = ExperimentConfig.from_dict({
    "model": {"init_spec": {"base": "trunc_normal"}},
    "optim": {"lr": 0.01},
    "settings": {"batch_size": 64},
    "epochs": 5,
    "seeds": list(range(K)),
})

# %%
work = Path(tempfile.mkdtemp(prefix="mimetic-farm-"))
report = run_farm(cfg, work, parallel=1)
print(f"trained {len(report.trained)} models into {work}")

# %%
stats = run_analyze(work, work / "analysis")
for layer, d in stats.items():
    s = d["stripe_scores"]
    print(f"layer {layer}: W1 rows {s['W1']['rows']:.2f} cols {s['W1']['columns']:.2f} | "
          f"W2 rows {s['W2']['rows']:.2f} cols {s['W2']['columns']:.2f} | rho {d['rho']:+.3f}")
    print("   striped W1 axes:", stripes_found(d) or "none")
