"""Craft per-bag (customized) perturbations that flip a trained classifier.

The attack adds one shared vector to every instance of a bag and grows it
iteratively: at each step it linearizes the gap between the two class
probabilities and moves just far enough to cross the boundary. Gradients of
different bags have different shapes, so each (n, d) gradient matrix is
collapsed to a d-vector either by averaging rows ("ave") or by keeping the
row of the most-attended instance ("att").
"""

import numpy as np

import milfool as mf

# moderate cluster separation: a strong but not saturated classifier, so the
# minimal flipping perturbations stay small and informative
dataset = mf.normalize(mf.generate_synthetic_dataset(
    mf.GenerationConfig(200, 5, 10, dimension=10, cluster_separation=1.5, seed=7)))
model, _ = mf.train(mf.init_model(10, seed=1), dataset, epochs=50, learning_rate=0.0001, seed=1)
print(f"clean accuracy {mf.accuracy(model, dataset):.3f}")

# --- unbounded attacks: how small can a flipping perturbation be? ------------
for mode in ("ave", "att"):
    config = mf.AttackConfig(mode=mode)  # xi defaults to inf: no projection
    results = [mf.mi_cap(model, bag, config) for bag in dataset]
    wins = [r for r in results if r.success]
    norms = np.array([r.perturbation.norm_l2 for r in wins])
    iters = np.array([r.iterations for r in wins])
    print(f"\nmode {mode}: flipped {len(wins)}/{len(results)} bags, "
          f"median |eps| {np.median(norms):.3f}, median iterations {int(np.median(iters))}")

# --- one bag under the microscope ---------------------------------------------
bag = next(b for b in dataset if b.label == 1)
result = mf.mi_cap(model, bag, mf.AttackConfig(mode="att"))
trace_before = model.forward(bag)
trace_after = model.forward(mf.apply_perturbation(bag, result.perturbation))
print(f"\nbag {bag.id}: p(positive) {trace_before.probs[1]:.3f} -> {trace_after.probs[1]:.3f} "
      f"after {result.iterations} iteration(s), |eps| = {result.perturbation.norm_l2:.3f}")

# --- budgeted attacks: project the result onto a norm ball --------------------
print("\nbudget  flipped  decrease")
for xi in (0.05, 0.1, 0.2, 0.5):
    perts, report = mf.mi_cap_dataset(model, dataset, mf.AttackConfig(mode="ave", xi=xi))
    print(f"{xi:6.2f}  {report.fooling_rate:7.3f}  {mf.decrease(model, dataset, perts):8.3f}")

# Baselines with the same budget barely move a confident model.
for kind in ("random", "mean"):
    pert = mf.baseline_perturbation(kind, dataset.dimension, xi=0.5, seed=3)
    print(f"{kind:>6} baseline at 0.5: decrease {mf.decrease(model, dataset, pert):.3f}")
