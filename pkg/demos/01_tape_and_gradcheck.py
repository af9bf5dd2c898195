"""Reverse-mode gradients on a small CNN, checked against finite differences."""

import numpy as np

from smckit import tensor as T
from smckit.gradcheck import run_suite
from smckit.models import ModelSpec, build

model = build(ModelSpec("small_cnn", (3, 8, 8), 4, (4, 8, 16)), seed=0)
x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
labels = np.eye(4)[[1, 3]]

# Ops record themselves only while a tape is active.
leaves = model.params.leaves()
with T.GradientTape() as tape:
    logits = model.forward(leaves, x)
    loss = T.scale(T.tsum(T.mul(T.log_softmax(logits), labels)), -0.5)
grads = dict(zip(leaves, T.backward(tape, loss, leaves.values())))
print(f"loss {loss.item():.5f}, {len(tape.records)} recorded ops")
for name, g in grads.items():
    print(f"  d loss / d {name:<8} shape {str(g.shape):<16} |g| = {np.linalg.norm(g):.4f}")

print("\nper-op finite-difference check (float64, central differences, h=1e-5):")
for r in run_suite():
    print(f"  {r.name:<16} {r.max_error:.2e}")

print("\nthe same suite with the relu backward rule broken:")
for r in run_suite(fault="relu"):
    if not r.passed:
        print(f"  {r.name:<16} {r.max_error:.2e}  <- caught")
