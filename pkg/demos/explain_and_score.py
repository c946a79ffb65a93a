"""Explain one prediction, then ask how faithful the explanation is.

A small MLP is pretrained on a synthetic 8-feature problem. For one test row
we compute LIME and KernelSHAP attributions from the same 200 perturbations
and score each with insertion (higher is better), deletion (lower is better)
and sensitivity-n. The last block shows the smooth version of the insertion
score used during training converging on the hard one as the temperature grows.

    python demos/explain_and_score.py
"""

import numpy as np

from idexpo.data import make_split, prepare, synthetic_dataset
from idexpo.explainers import explain, generate_perturbations
from idexpo.metrics import hard_curves, n_steps, sensitivity_n, soft_curves
from idexpo.training import pretrain

ds = synthetic_dataset(600, 8, 3, seed=4, informative=4, name="demo")
data = prepare(ds, make_split(ds.N, 0, 0))
model, _ = pretrain(data, seed=0, max_epochs=80, patience=10)
X_test, y_test = data.part("test")
print(f"test accuracy after pretraining: {np.mean(model.predict(X_test) == y_test):.3f}")

x = X_test[0]
y = int(model.predict(x[None, :])[0])
b = data.b
S = n_steps(data.Q, 0.5)
pset = generate_perturbations(x, b, 200, np.random.default_rng(0))

for kind in ("lime", "kernelshap"):
    phi = explain(x, y, model, pset, kind).contributions
    ins, dele = hard_curves(x, y, phi, b, S, model)
    sens = sensitivity_n(x, y, phi, b, 2, 100, model, np.random.default_rng(1))
    print(f"\n{kind}: phi = {np.array2string(phi, precision=3)}")
    print(f"  insertion curve {np.array2string(ins, precision=3)} -> mean {ins.mean():.4f}")
    print(f"  deletion curve  {np.array2string(dele, precision=3)} -> mean {dele.mean():.4f}")
    print(f"  sensitivity-2   {sens:.4f}")

print("\nsoft insertion vs hard insertion (kernelshap attributions):")
hard = hard_curves(x, y, phi, b, S, model)[0].mean()
for scale in (1, 10, 100, 1000):
    soft = soft_curves(x, y, phi, b, S, model, temperature_scale=scale)[0].mean()
    print(f"  temperature x{scale:<5} soft {soft:.6f}  gap {abs(soft - hard):.2e}")
