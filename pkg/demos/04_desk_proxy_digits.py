"""Vanilla SGD against two-channel SMC on a small real dataset.

The desk-scale CIFAR-10 comparison needs the CIFAR-10 binaries, which are not
always at hand.  This script runs the same protocol (three seeds, median,
clean labels and 40% symmetric noise) on the 8x8 handwritten digits that ship
with scikit-learn.  It is a proxy and says nothing definitive about CIFAR-10.

    python demos/04_desk_proxy_digits.py [epochs]
"""

import statistics
import sys
import time

import numpy as np
from sklearn.datasets import load_digits

from smckit.data import Dataset
from smckit.trainer import TrainConfig, run_experiment

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

digits = load_digits()
images = (digits.images * (255 / 16)).round().astype(np.uint8)[..., None]
order = np.random.default_rng(0).permutation(len(images))
train_idx, val_idx = order[:1297], order[1297:]
train = Dataset(images[train_idx], digits.target[train_idx], 10, "train")
val = Dataset(images[val_idx], digits.target[val_idx], 10, "val").with_stats(train.mean, train.std)
print(f"train {len(train)}  val {len(val)}  image {train.image_shape}")

# 8x8 inputs: crop padding of 4 would erase half the digit, so flips are off
# too (digits are not mirror-symmetric); the channels differ by cutout only.
recipe = ("cutout:3",)

for eta in (0.0, 0.4):
    finals, gaps = {}, {}
    for method in ("vanilla", "smc"):
        t0 = time.perf_counter()
        runs = [
            run_experiment(
                TrainConfig(method=method, arch="small_cnn", hidden=(16, 32, 64), epochs=epochs, batch_size=64,
                            lr=0.05, seed=s, noise_eta=eta, noise_seed=s, augment=recipe, dtype="float32"),
                train, val)
            for s in (0, 1, 2)
        ]
        finals[method] = statistics.median(r.final_val for r in runs)
        gaps[method] = statistics.median(r.gap for r in runs)
        print(f"eta={eta:.1f} {method:<8} median final {finals[method]:.4f}  median best-final gap "
              f"{gaps[method]:.4f}  ({time.perf_counter() - t0:.0f}s)")
    print(f"eta={eta:.1f} final margin smc - vanilla: {100 * (finals['smc'] - finals['vanilla']):+.2f} pp\n")
