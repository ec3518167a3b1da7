"""
Explaining a misclassification end to end
=========================================

Find a test image the model gets wrong, rank the training set for it, and
render saliency maps for the extreme examples. The harmful tail is the
interesting part of the report: those are the training images whose
influence pushed this prediction the wrong way (mislabeled or confusing
examples show up here). A planted label-flipped near-duplicate of the test
image demonstrates the effect at full strength.
"""

import warnings

import numpy as np

from tfa import (
    Dataset,
    Model,
    SyntheticShapesSpec,
    TrainConfig,
    channel_aggregate,
    explain_misclassification,
    generate_synthetic,
    tiny_cnn,
    train,
    write_grid_artifacts,
)

spec = SyntheticShapesSpec(
    size=12, noise=0.05, train_per_class=25, holdout_per_class=0, test_per_class=8, seed=3
)
train_ds, _, test_ds = generate_synthetic(spec)
arch = tiny_cnn((1, 12, 12), 3)
params, _ = train(train_ds, arch, TrainConfig(lr=0.2, epochs=6, batch_size=16, seed=3))
model = Model(arch)

predictions = model.predict(params, test_ds.X)
wrong = np.flatnonzero(predictions != test_ds.y)
print(f"misclassified test images: {wrong.tolist()}")

t = int(wrong[0]) if len(wrong) else 0
report = explain_misclassification(
    model, params, train_ds, test_ds.example(t), top_r=3, sigma=0.05, samples=10, seed=0,
    test_index=t,
)
print(f"\ntest {t}: predicted {report.predicted_class}, true {report.true_class}")
print("helpful:", [(r.train_index, round(r.score, 4)) for r in report.helpful])
print("harmful:", [(r.train_index, round(r.score, 4)) for r in report.harmful])
for idx, sal in report.maps.items():
    write_grid_artifacts(f"demo_out/mistake_test{t}_train{idx}", channel_aggregate(sal))
print(f"wrote {len(report.maps)} maps to demo_out/")

# now plant a near-duplicate of this test image with a deliberately wrong
# label; it should surface at the very bottom of the harmful tail
rng = np.random.default_rng(7)
near = np.clip(test_ds.example(t).x + rng.normal(0.0, 0.01, size=test_ds.example(t).x.shape), 0, 1)
logits = model.logits(params, test_ds.example(t).x[None])[0]
confusable = int(max((c for c in range(3) if c != test_ds.example(t).y), key=lambda c: logits[c]))
planted = Dataset(np.concatenate([train_ds.X, near[None]]), np.append(train_ds.y, confusable))

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # the planted run may hit a correct test image
    report2 = explain_misclassification(
        model, params, planted, test_ds.example(t), top_r=3, sigma=0.0, samples=1, seed=0,
        test_index=t,
    )
planted_index = len(train_ds)
print(f"\nafter planting a mislabeled near-duplicate as train {planted_index}:")
print("harmful:", [(r.train_index, round(r.score, 4)) for r in report2.harmful])
found = any(r.train_index == planted_index for r in report2.harmful)
print(f"planted duplicate in the harmful tail: {found}")
