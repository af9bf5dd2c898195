"""How channels B and C feed channel A one step later.

At step t channel A trains on batch t while B and C look at batch t+1 with
their own augmentations.  Their soft labels wait in a buffer and become the
targets when batch t+1 reaches channel A.
"""

import numpy as np

from smckit.data import Dataset, EpochSampler
from smckit.trainer import TrainConfig, run_experiment

rng = np.random.default_rng(0)
labels = rng.integers(0, 3, size=40)
images = (rng.normal(size=(40, 8, 8, 3)) * 30 + 100 + 40 * labels[:, None, None, None]).clip(0, 255).astype(np.uint8)
train = Dataset(images, labels, 3)

sampler = EpochSampler(len(train), 16, seed=0, epochs=2)
print("step  epoch  batch (first 5 ids)      lookahead (first 5 ids)")
for st in sampler:
    look = "-" if st.lookahead is None else st.lookahead[:5].tolist()
    print(f"{st.global_step:>4}  {st.epoch:>5}  {str(st.indices[:5].tolist()):<24} {look}")

cfg = TrainConfig(method="smc", k=3, arch="small_cnn", hidden=(4, 8, 8), batch_size=16, epochs=2)


def show(st, res):
    bd = res.breakdown
    aligned = all(np.array_equal(t, st.indices) for t in res.teacher_indices)
    print(f"step {st.global_step}: {len(bd.kl)} KL terms, lambda {bd.lam:.3f}, "
          f"CE {bd.ce:.3f}, total {bd.total:.3f}, stored labels match batch: {aligned}")


print()
run_experiment(cfg, train, train.with_stats(train.mean, train.std), on_step=show)
