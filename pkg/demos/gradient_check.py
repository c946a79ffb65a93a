"""Check the analytic gradient of the full fine-tuning loss against finite differences.

The loss here is cross-entropy plus the insertion and deletion regularizers,
computed through LIME explanations that are themselves functions of the model
weights. Every weight matrix and bias gets a central-difference estimate, and
the script prints the normwise relative error per parameter for each variant.

    python demos/gradient_check.py
"""

import numpy as np

from idexpo.autodiff import TapeGraph, check_gradients
from idexpo.explainers import generate_perturbations
from idexpo.predictor import TapeModel, init_model
from idexpo.training import TrainConfig, batch_loss

rng = np.random.default_rng(0)
model = init_model(6, 3, seed=0, hidden=8)
X = rng.normal(size=(4, 6))
y = np.array([0, 1, 2, 1])
b = np.zeros(6)

variants = {
    "deletion variant a": TrainConfig(lambda12=1.0, lambda3=0.1, del_variant="a", M=20),
    "deletion variant c, routed selection": TrainConfig(lambda12=1.0, lambda3=0.1, del_variant="c", M=20,
                                                        route_selection=True),
    "fidelity penalty": TrainConfig(method="expo-f", expo_weight=1.0, M=20),
}
for title, cfg in variants.items():
    psets = [generate_perturbations(x, b, cfg.M, np.random.default_rng(n)).with_kernel(cfg.explainer)
             for n, x in enumerate(X)]
    g = TapeGraph()
    tm = TapeModel.attach(g, model)
    loss = batch_loss(tm, X, y, b, cfg, psets)
    rep = check_gradients(g, loss, step=1e-5, tolerance=1e-4)
    print(f"{title}: loss {g.forward(loss)[0, 0]:.6f}, {len(g)} tape nodes")
    for p, err in rep.errors.items():
        print(f"  {g.names.get(p, f'param {p}'):<12} shape {rep.analytic[p].shape!s:<9} error {err:.1e}")
    print(f"  {'passed' if rep.passed else 'FAILED'} at tolerance {rep.tolerance:g}\n")
