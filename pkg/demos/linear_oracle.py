"""Why cluster weights are needed, in the simplest possible model.

Responses are a cluster effect plus noise and the cluster size grows with the
effect.  The jackknife returns the responses, so the estimating function is
centred only when each subject is weighted by one over its cluster size.
"""

# %%
from pseudoics.linear_oracle import LinearConfig, estfun_expectation_mc, simulate_linear

# %%
panel = simulate_linear(LinearConfig(m=8, seed=3))
for nu, n in zip(panel.nu, panel.sizes):
    print(f"cluster effect {nu:+.2f} -> size {n}")

# %%
for label, cfg in (("informative sizes", LinearConfig()), ("constant sizes", LinearConfig(constant_size=10))):
    for weight in ("one", "inv_n"):
        r = estfun_expectation_mc(cfg, weight, 2000)
        print(f"{label:18s} w={weight:5s} mean {r.mean:+.4f}  z {r.z:+.2f}")
