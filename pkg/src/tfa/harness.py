"""Quantitative evaluation protocols for training feature attribution.

Three experiments live here. The paired insertion intervention keeps only
the most salient pixels of an influential training image, takes one SGD
step, and asks whether the test loss drops more than it does for a random
pixel subset of the same size. The misclassification report ranks the
training set for a single wrong prediction and attaches saliency maps to
the extremes of the ranking. The patch sweep plants a shortcut patch in a
growing share of one class's training images and measures both the damage
to patched probe images and how sharply the saliency maps localize the
patch.
"""

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .models import Dataset, LabeledExample, Model, TrainConfig, sgd_step, train
from .rng import child_seed, stream
from .saliency import channel_aggregate, smoothgrad_saliency
from .tda import rank_training_set

FILL_MODES = ("dataset-mean", "zero")
MASK_MODES = ("topk", "random")
CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")

Z95 = 1.96  # normal-approximation 95% interval


@dataclass(frozen=True)
class InterventionConfig:
    """Knobs for the paired insertion experiment."""

    k_percents: tuple = (10, 20, 30, 40, 50, 100)
    num_tests: int = 20
    top_m: int = 10
    lr_step: float = 1e-3
    sigma: float = 0.05
    samples: int = 30
    seed: int = 0
    fill: str = "dataset-mean"

    def __post_init__(self):
        if not self.k_percents:
            raise ValueError("need at least one k value")
        for k in self.k_percents:
            if not 0 < k <= 100:
                raise ValueError(f"k percent must lie in (0, 100], got {k}")
        if self.num_tests < 1 or self.top_m < 1 or self.samples < 1:
            raise ValueError("num_tests, top_m and samples must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}")


@dataclass(frozen=True)
class PairedResult:
    """Per-k aggregate of the paired topk/random deltas."""

    k: float
    mean_random: float
    mean_topk: float
    mean_paired_delta: float
    ci_half_width: float
    pairs: int

    def __post_init__(self):
        if self.ci_half_width < 0:
            raise ValueError("confidence half-width cannot be negative")
        if self.pairs < 1:
            raise ValueError("need at least one pair")


@dataclass(frozen=True)
class PatchSpec:
    """A square shortcut patch stamped onto target-class training images."""

    size: int
    color: tuple
    target_class: int
    fraction: float
    corner: str = "bottom-right"
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("patch size must be at least one pixel")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("patch fraction must lie in [0, 1]")
        if self.corner not in CORNERS:
            raise ValueError(f"corner must be one of {CORNERS}")
        for v in self.color:
            if not 0.0 <= v <= 1.0:
                raise ValueError("patch color channels must lie in [0, 1]")


@dataclass(frozen=True)
class PatchSweepRow:
    fraction: float
    overall_accuracy: float
    unpatched_target_accuracy: float
    patched_probe_accuracy: float
    patch_attribution_fraction: float

    def __post_init__(self):
        for name in (
            "fraction",
            "overall_accuracy",
            "unpatched_target_accuracy",
            "patched_probe_accuracy",
            "patch_attribution_fraction",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class MisclassificationReport:
    """Ranking extremes plus saliency maps for one (usually wrong) prediction."""

    test_index: int
    predicted_class: int
    true_class: int
    correctly_classified: bool
    helpful: tuple
    harmful: tuple
    maps: dict = field(repr=False)


def retained_pixel_count(k: float, height: int, width: int) -> int:
    # ceil so that any positive k keeps at least one pixel
    return math.ceil(k / 100.0 * height * width)


def mask_insert(x, grid, k, fill, mode: str = "topk", seed=None) -> np.ndarray:
    """Keep the top (or a random) k% of pixels, fill the rest.

    x is a (C, H, W) image and grid a non-negative (H, W) importance map.
    A retained pixel keeps all its channels. `fill` is a scalar or a
    per-channel vector. topk breaks ties by ascending flat index so the
    retained set is a pure function of the grid; random draws the set from
    `seed` (an int or a Generator) independently of the grid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    c, h, w = x.shape
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (h, w):
        raise ValueError(f"grid shape {grid.shape} does not match image {(h, w)}")
    if not 0 < k <= 100:
        raise ValueError(f"k percent must lie in (0, 100], got {k}")
    if mode not in MASK_MODES:
        raise ValueError(f"mode must be one of {MASK_MODES}")

    keep = retained_pixel_count(k, h, w)
    if mode == "topk":
        # stable argsort on the negated grid: ties resolve to lower flat index
        order = np.argsort(-grid.ravel(), kind="stable")
        kept = order[:keep]
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        kept = rng.permutation(h * w)[:keep]

    flat = x.reshape(c, h * w)
    masked = np.empty_like(flat)
    masked[:] = np.reshape(np.broadcast_to(np.asarray(fill, dtype=np.float64), (c,)), (c, 1))
    masked[:, kept] = flat[:, kept]
    return masked.reshape(c, h, w)


def intervention_delta(
    model: Model,
    params,
    z_masked: LabeledExample,
    z_test: LabeledExample,
    lr_step: float,
    kind: str = "cross-entropy",
) -> float:
    """Test-loss change from one SGD step on the masked example.

    The step starts from a copy; the caller's parameters are untouched.
    Positive means the step hurt the test prediction.
    """
    before = model.loss(params, z_test, kind)
    g = model.param_grad(params, z_masked, kind)
    stepped = sgd_step(params, g, lr_step)
    return model.loss(stepped, z_test, kind) - before


def paired_insertion_experiment(
    model: Model,
    params,
    holdout: Dataset,
    test_set: Dataset,
    config: InterventionConfig,
    kind: str = "cross-entropy",
) -> list:
    """Run the paired topk-vs-random insertion intervention.

    For each sampled test image the top-M holdout images by grad-cos are
    selected, a smoothed saliency grid is computed per pair, and for every
    k both conditions are evaluated from the same starting parameters. The
    per-k aggregate reports the mean paired difference topk minus random
    with a normal-approximation 95% interval. Every random draw comes from
    a named child stream of the master seed, so reruns reproduce each cell
    exactly and adding a k value never perturbs the others.
    """
    if len(holdout) == 0 or len(test_set) == 0:
        raise ValueError("holdout pool and test set must be non-empty")

    if config.fill == "dataset-mean":
        fill = holdout.mean_pixel()
    else:
        fill = np.zeros(holdout.X.shape[1])

    num_tests = min(config.num_tests, len(test_set))
    picked = stream(config.seed, "insertion/tests").choice(
        len(test_set), size=num_tests, replace=False
    )

    deltas = {k: [] for k in config.k_percents}
    for t in sorted(int(i) for i in picked):
        z_test = test_set.example(t)
        ranking = rank_training_set(model, params, holdout, z_test, "grad-cos", kind=kind)
        top = ranking.helpful(config.top_m)
        if not top:
            raise ValueError("no usable holdout example for a sampled test image")
        for rec in top:
            m = rec.train_index
            z_train = holdout.example(m)
            sal = smoothgrad_saliency(
                model,
                params,
                z_train,
                z_test,
                sigma=config.sigma,
                samples=config.samples,
                seed=child_seed(config.seed, f"insertion/smooth/{t}/{m}"),
                kind=kind,
            )
            grid = channel_aggregate(sal)
            for k in config.k_percents:
                x_top = mask_insert(z_train.x, grid, k, fill, "topk")
                x_rand = mask_insert(
                    z_train.x,
                    grid,
                    k,
                    fill,
                    "random",
                    seed=stream(config.seed, f"insertion/rand/{t}/{m}/{k}"),
                )
                d_top = intervention_delta(
                    model, params, LabeledExample(x_top, z_train.y), z_test, config.lr_step, kind
                )
                d_rand = intervention_delta(
                    model, params, LabeledExample(x_rand, z_train.y), z_test, config.lr_step, kind
                )
                deltas[k].append((d_top, d_rand))

    results = []
    for k in config.k_percents:
        pairs = deltas[k]
        top_vals = np.array([d for d, _ in pairs])
        rand_vals = np.array([d for _, d in pairs])
        diff = top_vals - rand_vals
        if len(pairs) > 1:
            half = Z95 * float(np.std(diff, ddof=1)) / math.sqrt(len(pairs))
        else:
            half = 0.0
        results.append(
            PairedResult(
                k=float(k),
                mean_random=float(rand_vals.mean()),
                mean_topk=float(top_vals.mean()),
                mean_paired_delta=float(diff.mean()),
                ci_half_width=half,
                pairs=len(pairs),
            )
        )
    return results


def explain_misclassification(
    model: Model,
    params,
    dataset: Dataset,
    z_test: LabeledExample,
    *,
    top_r: int = 5,
    sigma: float = 0.05,
    samples: int = 10,
    seed: int = 0,
    kind: str = "cross-entropy",
    test_index: int = -1,
) -> MisclassificationReport:
    """Rank the training set for one test example and map the extremes.

    Intended for misclassified inputs; a correctly classified one still
    produces a report but raises a warning first. Scores are grad-cos,
    positive = helpful, so the harmful list carries the most negative
    scores with the worst offender first. Each listed example gets a
    smoothed saliency map seeded by its train index.
    """
    predicted = model.predict_one(params, z_test.x)
    correct = predicted == z_test.y
    if correct:
        warnings.warn(
            "test example is correctly classified; the harmful list may be uninformative",
            RuntimeWarning,
            stacklevel=2,
        )
    ranking = rank_training_set(
        model, params, dataset, z_test, "grad-cos", test_index=test_index, kind=kind
    )
    r = min(top_r, len(ranking.records))
    helpful = tuple(ranking.helpful(r))
    harmful = tuple(ranking.harmful(r))

    maps = {}
    for rec in (*helpful, *harmful):
        if rec.train_index in maps:
            continue  # helpful and harmful overlap when 2r exceeds the dataset
        maps[rec.train_index] = smoothgrad_saliency(
            model,
            params,
            dataset.example(rec.train_index),
            z_test,
            sigma=sigma,
            samples=samples,
            seed=child_seed(seed, f"explain/map/{rec.train_index}"),
            kind=kind,
            train_index=rec.train_index,
            test_index=test_index,
        )
    return MisclassificationReport(
        test_index=test_index,
        predicted_class=predicted,
        true_class=z_test.y,
        correctly_classified=correct,
        helpful=helpful,
        harmful=harmful,
        maps=maps,
    )


def patch_region(image_shape, spec: PatchSpec):
    """Row and column slices covered by the patch inside an image."""
    h, w = image_shape[-2], image_shape[-1]
    if spec.size > h or spec.size > w:
        raise ValueError(f"patch of size {spec.size} does not fit in {h}x{w} image")
    rows = slice(h - spec.size, h) if spec.corner.startswith("bottom") else slice(0, spec.size)
    cols = slice(w - spec.size, w) if spec.corner.endswith("right") else slice(0, spec.size)
    return rows, cols


def apply_patch(x, spec: PatchSpec) -> np.ndarray:
    """Stamp the patch color onto a copy of one (C, H, W) image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if len(spec.color) != x.shape[0]:
        raise ValueError(
            f"patch color has {len(spec.color)} channels, image has {x.shape[0]}"
        )
    rows, cols = patch_region(x.shape, spec)
    out = x.copy()
    for c, v in enumerate(spec.color):
        out[c, rows, cols] = v
    return out


def make_patched_dataset(dataset: Dataset, spec: PatchSpec) -> Dataset:
    """Patch an exact floor(fraction * count) of the target-class images.

    The patched subset is chosen by a seeded shuffle of the target-class
    indices, so the same spec always marks the same images. Labels and all
    other images are untouched.
    """
    target = np.flatnonzero(dataset.y == spec.target_class)
    count = math.floor(spec.fraction * len(target))
    order = stream(spec.seed, "patch/choose").permutation(len(target))
    chosen = target[order[:count]]

    X = dataset.X.copy()
    for i in chosen:
        X[i] = apply_patch(X[i], spec)
    return Dataset(X, dataset.y.copy())


def patch_attribution_fraction(grid, spec: PatchSpec, top_share: float = 0.1) -> float:
    """Share of the top-share most salient pixels that fall inside the patch.

    Ties at the threshold resolve by ascending flat index, mirroring
    mask_insert, so the measured set is deterministic.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a (H, W) grid, got shape {grid.shape}")
    if not 0.0 < top_share <= 1.0:
        raise ValueError("top_share must lie in (0, 1]")
    h, w = grid.shape
    keep = math.ceil(top_share * h * w)
    order = np.argsort(-grid.ravel(), kind="stable")
    kept = order[:keep]
    inside = np.zeros((h, w), dtype=bool)
    rows, cols = patch_region(grid.shape, spec)
    inside[rows, cols] = True
    return float(inside.ravel()[kept].mean())


def patch_sweep(
    base_train: Dataset,
    base_test: Dataset,
    fractions,
    arch,
    train_config: TrainConfig,
    spec: PatchSpec,
    probe_class: int,
    *,
    probe_count: int = 5,
    harmful_count: int = 10,
    sigma: float = 0.05,
    samples: int = 10,
    top_share: float = 0.1,
    seed: int = 0,
    kind: str = "cross-entropy",
) -> list:
    """Retrain at each patch fraction and measure shortcut uptake.

    The patch goes onto target-class training images only; test and
    validation data stay clean except for the deliberately patched probe
    images. Probe images belong to a different class, so once the model
    has learned patch-implies-target their accuracy collapses. For each
    fraction a handful of patched probes (misclassified ones first, topped
    up deterministically) are explained via their most harmful training
    examples, and the mean patch attribution fraction of those saliency
    grids is reported. Every per-fraction job derives its own seeds from
    the fraction value, so the rows are independent of sweep order.
    """
    if probe_class == spec.target_class:
        raise ValueError("probe class must differ from the patch target class")
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fractions must lie in [0, 1], got {f}")

    model = Model(arch)
    probe_pool = np.flatnonzero(base_test.y == probe_class)
    if len(probe_pool) == 0:
        raise ValueError("test set has no probe-class images")
    target_test = np.flatnonzero(base_test.y == spec.target_class)

    rows = []
    for f in fractions:
        tag = f"{f:.6f}"
        spec_f = PatchSpec(
            size=spec.size,
            color=spec.color,
            target_class=spec.target_class,
            fraction=f,
            corner=spec.corner,
            seed=child_seed(seed, f"patch/choose/{tag}"),
        )
        train_ds = make_patched_dataset(base_train, spec_f)
        cfg = dataclasses.replace(train_config, seed=child_seed(seed, f"patch/train/{tag}"))
        params, _ = train(train_ds, arch, cfg)

        overall = model.accuracy(params, base_test)
        if len(target_test):
            unpatched_target = float(
                np.mean(model.predict(params, base_test.X[target_test]) == spec.target_class)
            )
        else:
            unpatched_target = 0.0

        patched_probe_X = np.stack(
            [apply_patch(base_test.X[i], spec_f) for i in probe_pool]
        )
        probe_preds = model.predict(params, patched_probe_X)
        patched_probe_acc = float(np.mean(probe_preds == probe_class))

        # probes: misclassified patched probe images first, then the rest
        # in index order, up to probe_count
        wrong = [int(j) for j in np.flatnonzero(probe_preds != probe_class)]
        right = [int(j) for j in np.flatnonzero(probe_preds == probe_class)]
        probe_rows = (wrong + right)[:probe_count]

        fractions_seen = []
        for j in probe_rows:
            z_probe = LabeledExample(patched_probe_X[j], probe_class)
            ranking = rank_training_set(model, params, train_ds, z_probe, "grad-cos", kind=kind)
            for rec in ranking.harmful(min(harmful_count, len(ranking.records))):
                sal = smoothgrad_saliency(
                    model,
                    params,
                    train_ds.example(rec.train_index),
                    z_probe,
                    sigma=sigma,
                    samples=samples,
                    seed=child_seed(seed, f"patch/map/{tag}/{j}/{rec.train_index}"),
                    kind=kind,
                )
                grid = channel_aggregate(sal)
                fractions_seen.append(patch_attribution_fraction(grid, spec_f, top_share))

        rows.append(
            PatchSweepRow(
                fraction=float(f),
                overall_accuracy=overall,
                unpatched_target_accuracy=unpatched_target,
                patched_probe_accuracy=patched_probe_acc,
                patch_attribution_fraction=float(np.mean(fractions_seen)),
            )
        )
    return rows
