"""Train personalised caches with DMTFL and compare against FedAvg and
the global popularity heuristic on one small instance.

Run with ``python tutorials/02_train_and_compare.py``.
"""
import dataclasses

from dmtfl_cache import (GenConfig, HyperParams, avg_cache_hit, cache_set_from_model, fedavg,
                         heuristic_popular, min_per_bs_hit, run_dmtfl, synth_noniid)
from dmtfl_cache.data import train_test_split
from dmtfl_cache.objective import LossConfig

C = 13
gen = GenConfig(B=4, gamma=0.3, samples_per_bs=200, seed=3)
hp = HyperParams(cache_budget=C, predictor="cached", seed=3)

split = [train_test_split(d) for d in synth_noniid(gen)]
train = [a for a, _ in split]
test = [b for _, b in split]

res = run_dmtfl(train, hp)
print("learned mixture weights w:", res.weights.w.round(3))
print("collaboration weights alpha:\n", res.alpha.alpha.round(3))
obj = res.history.objectives()
print(f"objective {obj[0, 0]:.3f} -> {obj[-1, 1]:.3f} over {hp.T} rounds, "
      f"{res.history.total_messages()} messages")

caches = {"dmtfl": [cache_set_from_model(m.phi, C) for m in res.models]}
g = fedavg(train, hp.T, hp.eta, C=C, loss=LossConfig(predictor="cached"))
caches["fedavg"] = [cache_set_from_model(g.phi, C)] * len(train)
caches["heuristic"] = [heuristic_popular(train, C)] * len(train)

for name, sets in caches.items():
    print(f"{name:10s} avg hit {avg_cache_hit(sets, test):.3f}   worst BS hit {min_per_bs_hit(sets, test):.3f}")

# A larger regulariser shrinks the caches toward the centre of the polytope.
res_reg = run_dmtfl(train, dataclasses.replace(hp, rho=0.5))
print("avg hit with rho=0.5:",
      round(avg_cache_hit([cache_set_from_model(m.phi, C) for m in res_reg.models], test), 3))
