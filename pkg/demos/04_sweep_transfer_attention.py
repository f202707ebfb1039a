"""Magnitude sweeps, cross-model transfer, and the attention distribution.

Three evaluation tools around the attacks: a sweep of metrics across the
perturbation budget (how hard can you push before bags distort), a transfer
matrix (does a perturbation built against one network fool another), and a
histogram/KDE of attention values (most instances get almost none, which is
exactly what the "att" gradient mode exploits).
"""

from pathlib import Path

import milfool as mf

train_ds = mf.normalize(mf.generate_synthetic_dataset(
    mf.GenerationConfig(200, 5, 10, dimension=10, cluster_separation=4.0, seed=7)))
test_ds = mf.normalize(mf.generate_synthetic_dataset(
    mf.GenerationConfig(100, 5, 10, dimension=10, cluster_separation=4.0, seed=8)))

plain, _ = mf.train(mf.init_model(10, variant="plain", seed=1), train_ds, seed=1)
gated, _ = mf.train(mf.init_model(10, variant="gated", seed=2), train_ds, seed=2)
print(f"plain test accuracy {mf.accuracy(plain, test_ds):.3f}, "
      f"gated test accuracy {mf.accuracy(gated, test_ds):.3f}")

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# --- budget sweep --------------------------------------------------------------
rows = mf.xi_sweep(plain, test_ds, algorithm="uap", mode="ave",
                   xis=[0.0, 0.1, 0.5, 1.0, 2.0, 5.0],
                   config=mf.AttackConfig(seed=1), dataset_id="synthetic", model_id="plain")
print("\nbudget    acc  recall  decrease  fooling")
for r in rows:
    print(f"{r.xi:6.2f}  {r.acc:5.3f}  {r.recall:6.3f}  {r.decrease:8.3f}  {r.fooling_rate:7.3f}")
mf.write_metric_rows(out / "sweep.csv", rows)

# --- transfer between networks ---------------------------------------------------
matrix = mf.transfer_matrix([plain, gated], test_ds,
                            mf.AttackConfig(xi=2.0, mode="ave", seed=3), names=["plain", "gated"])
print("\ndecrease of column model under row model's universal perturbation:")
print(f"{'':>8}" + "".join(f"{t:>8}" for t in matrix.target_ids))
for i, source_id in enumerate(matrix.source_ids):
    print(f"{source_id:>8}" + "".join(f"{v:8.3f}" for v in matrix.values[i]))
mf.write_transfer_csv(out / "transfer.csv", matrix)

# --- attention distribution ------------------------------------------------------
values = mf.collect_attention(plain, train_ds)
summary = mf.attention_summary(values)
modal = summary.bin_centers[summary.counts.argmax()]
print(f"\n{values.size} attention values; modal bin center {modal:.2f}, "
      f"fraction below 0.1: {(values < 0.1).mean():.2f}")
mf.write_histogram_csv(out / "attention_hist.csv", summary)
mf.write_kde_csv(out / "attention_kde.csv", summary)
print(f"wrote sweep/transfer/attention CSVs under {out}")
