"""
Catching a planted shortcut with training-image saliency
========================================================

Paint a small bright square onto a growing fraction of one class's
training images and retrain. Once the patch is common enough the model
adopts it as a shortcut: test images of ANOTHER class that carry the patch
collapse to the target label. The question for attribution: do the
saliency maps of the harmful training images point AT the patch? The
patch attribution fraction measures the share of each map's top-10%
pixels inside the 5x5 patch square; with no shortcut it sits near the
area baseline 25/1024 = 0.024.

Two retrains at the full 32px experiment scale, about half a minute. The
eight-fraction sweep runs in the acceptance suite and via `tfa
patch-sweep`.
"""

from tfa import PatchSpec, SyntheticShapesSpec, TrainConfig, generate_synthetic, patch_sweep, tiny_cnn

spec = SyntheticShapesSpec(
    size=32, noise=0.05, train_per_class=200, holdout_per_class=0, test_per_class=40, seed=0
)
train_ds, _, test_ds = generate_synthetic(spec)
arch = tiny_cnn((1, 32, 32), 3)
config = TrainConfig(lr=0.25, epochs=20, batch_size=32, seed=0, lr_decay=0.93)
patch = PatchSpec(size=5, color=(0.95,), target_class=0, fraction=0.0)

rows = patch_sweep(
    train_ds,
    test_ds,
    fractions=(0.0, 1.0),
    arch=arch,
    train_config=config,
    spec=patch,
    probe_class=1,
    probe_count=5,
    harmful_count=10,
    sigma=0.05,
    samples=10,
    seed=11,
)

print(f"{'fraction':>9} {'overall':>8} {'target':>8} {'probe+patch':>12} {'patch attr':>11}")
for r in rows:
    print(
        f"{r.fraction:9.2f} {r.overall_accuracy:8.3f} {r.unpatched_target_accuracy:8.3f} "
        f"{r.patched_probe_accuracy:12.3f} {r.patch_attribution_fraction:11.4f}"
    )
print("\nwith the shortcut planted everywhere, patched probe images collapse to")
print("the target label and the harmful images' saliency locks onto the patch")
