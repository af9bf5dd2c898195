"""Temperature, the KL term and the cosine weight that mixes it with CE."""

import numpy as np

from smckit.losses import lambda_schedule, soften, total_loss

logits = np.array([[3.0, 1.0, 0.2]])
for tau in (0.5, 1.0, 1.5, 4.0):
    print(f"tau={tau:<4} soft label {np.round(soften(logits, tau)[0], 4)}")

# The KL weight climbs from 0 to alpha over the run, so early training is
# driven by hard labels and late training mostly by stored predictions.
S = 20
print("\nstep  lambda (alpha=0.9)")
for s in range(0, S + 1, 4):
    lam = lambda_schedule(0.9, s, S)
    print(f"{s:>4}  {lam:.4f}  {'#' * int(round(40 * lam))}")

bd = total_loss(1.2, [0.30, 0.25], lambda_schedule(0.9, 15, S))
print(f"\nCE 1.2, KL terms 0.30 + 0.25, lambda {bd.lam:.3f} -> total {bd.total:.4f}")
print(f"first step, nothing stored yet -> total {total_loss(1.2, [], 0.0).total}")
