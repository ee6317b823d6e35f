# Familiar versus novel viewpoints on synthetic glyphs.
#
# Five outline shapes are rendered at six training angles around upright
# (-60 to 40 degrees) and tested both at those angles and at twelve angles the
# model never saw (60 to 280 degrees). The gap between the two accuracies is
# the quantity of interest; some glyphs (the ring, the square every 90
# degrees) look the same under rotation and are easier than others.
#
# Run:  python3 demos/03_novel_viewpoints.py   (a couple of minutes)

import numpy as np

from mcae.data import ViewpointSpec, make_viewpoint_dataset, render_shape, split_train_val
from mcae.pipeline import MCAEModel, ModelConfig, finetune_forward
from mcae.training import TrainConfig, evaluate, run_finetune

spec = ViewpointSpec()
print("classes:", ", ".join(spec.classes))
print("training angles:", spec.train_angles)
print("novel angles:   ", spec.novel_angles)

# What the letter T looks like at a familiar and a novel angle.
for angle in (0, 180):
    img = render_shape("T", angle)[0]
    print(f"\nT at {angle} degrees")
    for row in img[2:26:2]:
        print("".join("#" if v > 0.5 else "." for v in row[2:26:2]))

train, familiar, novel = make_viewpoint_dataset(spec, n_per_cell=40, rng=10)
train, val = split_train_val(train, 0.1, seed=0)
print(f"\n{len(train)} training, {len(familiar)} familiar-test, {len(novel)} novel-test images")

model = MCAEModel.build(ModelConfig(num_caps=8, caps_dim=8, encoder_layers=2, num_classes=5), "finetune", 0)
run_finetune(model, TrainConfig(phase="finetune", epochs=10, batch_size=32), train, val, log=print)

fam = evaluate(model, familiar)["top1"]
nov = evaluate(model, novel)["top1"]
print(f"\nfamiliar top-1 {fam:.3f}   novel top-1 {nov:.3f}   gap {fam - nov:+.3f}   chance {1 / 5:.3f}")

# Per-class accuracy at novel angles shows which shapes carry over.
pred = np.concatenate([finetune_forward(model, novel.images[i:i + 256]).data.argmax(1)
                       for i in range(0, len(novel), 256)])
for c, name in enumerate(spec.classes):
    sel = novel.labels == c
    print(f"  {name:9s} {np.mean(pred[sel] == c):.3f}")
