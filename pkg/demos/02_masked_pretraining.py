# Masked patch reconstruction on a slice of MNIST.
#
# Each 28x28 digit is cut into a 4x4 grid of 7x7 patches. Half of the patches
# are hidden, the encoder sees only the rest, and a capsule decoder that spans
# every location fills the gaps. After a few epochs the reconstructions pick up
# stroke layout.
#
# Run:  python3 demos/02_masked_pretraining.py [out_dir]
# Needs the MNIST IDX files (MCAE_DATA_DIR or /root/data/mnist). About a minute
# on one core.

import sys
from pathlib import Path

import numpy as np

from mcae.cli import reconstruction_triplet, write_pgm
from mcae.data import load_mnist, split_train_val, stratified_subset
from mcae.masking import sample_mask
from mcae.pipeline import MCAEModel, ModelConfig
from mcae.training import TrainConfig, run_pretrain

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out_dir.mkdir(parents=True, exist_ok=True)

digits = stratified_subset(load_mnist(split="train"), 1000, seed=0)
train, val = split_train_val(digits, 0.1, seed=0)

config = ModelConfig(num_caps=8, caps_dim=8, encoder_layers=2)
model = MCAEModel.build(config, "pretrain", seed=0)
print(f"{config.L} patches per image, {sum(p.size for p in model.named_parameters().values()):,} parameters")

recipe = TrainConfig(phase="pretrain", epochs=3, batch_size=16, max_grad_norm=5.0)
result = run_pretrain(model, recipe, train, val, log=print)
best = min(r.val_loss for r in result.history)
print(f"validation masked-patch MSE {result.initial_val_loss:.4f} -> {best:.4f}")


def ascii_art(img, levels=" .:-=+*#%@"):
    q = np.clip(img, 0, 1) * (len(levels) - 1)
    return ["".join(levels[int(v)] for v in row[::2]) for row in q[::2]]


# One held-out digit: hidden patches are black on the left, filled in the
# middle, and the original is on the right.
plan = sample_mask(config.L, 0.5, np.random.default_rng(7))
masked, recon, original = reconstruction_triplet(model, val.images[0], plan, np.random.default_rng(0))
for row in zip(ascii_art(masked[0]), ascii_art(recon[0]), ascii_art(original[0])):
    print("   ".join(row))

for tag, img in (("masked", masked), ("recon", recon), ("original", original)):
    write_pgm(out_dir / f"digit_{tag}.pgm", img[0])
print(f"PGM files written to {out_dir}/")
