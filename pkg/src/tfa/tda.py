"""Training-data attribution scores.

Methods that answer "which training examples made this prediction happen":

* grad_cos: cosine similarity between the parameter gradients of a training
  example's loss and a test example's loss. Positive means a step that helps
  the training example also helps the test example.
* grad_effect: first-order prediction of the test-loss change caused by one
  loss-reducing step of size epsilon on the training example. Negative means
  the step helps the test example.
* influence_function / relatif: curvature-aware variants through a damped
  Hessian solve. They keep the loss-change sign convention (negative =
  helpful); rankings flip them so "descending score" always reads
  most-helpful-first regardless of method.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh

from . import autodiff as ad
from .models import Dataset, LabeledExample, Model, ParamVector

METHODS = ("grad-cos", "grad-effect", "influence", "relatif")

DEGENERATE_NORM = 1e-12


class DegenerateGradientError(ValueError):
    """A loss gradient is numerically zero, so direction is undefined."""

    def __init__(self, side: str, norm: float):
        self.side = side
        self.norm = norm
        super().__init__(
            f"{side} gradient norm {norm:.3e} is below {DEGENERATE_NORM:.0e}; "
            "cosine direction is undefined"
        )


class InsufficientDampingError(RuntimeError):
    """H + lam I is not positive definite at the requested damping."""

    def __init__(self, lam: float, smallest_eigenvalue: float):
        self.lam = lam
        self.smallest_eigenvalue = smallest_eigenvalue
        super().__init__(
            f"H + {lam:.3e} I is not positive definite "
            f"(smallest eigenvalue {smallest_eigenvalue:.3e}); increase damping"
        )


def query_gradient(
    model: Model,
    params: ParamVector,
    z_test: LabeledExample,
    kind: str = "cross-entropy",
    test_label: str = "true",
) -> np.ndarray:
    """Parameter gradient of the test example's loss.

    test_label="true" differentiates the loss at the example's own label;
    "predicted" uses the model's argmax label instead.
    """
    if test_label == "true":
        label = z_test.y
    elif test_label == "predicted":
        label = model.predict_one(params, z_test.x)
    else:
        raise ValueError("test_label must be 'true' or 'predicted'")
    return model.param_grad(params, LabeledExample(z_test.x, label), kind)


def _checked_norm(g: np.ndarray, side: str) -> float:
    n = float(np.linalg.norm(g))
    if n <= DEGENERATE_NORM:
        raise DegenerateGradientError(side, n)
    return n


def grad_cos(
    model: Model,
    params: ParamVector,
    z_train: LabeledExample,
    z_test: LabeledExample,
    kind: str = "cross-entropy",
    test_label: str = "true",
) -> float:
    """Cosine of the train/test loss-gradient pair; in [-1, 1]."""
    g_test = query_gradient(model, params, z_test, kind, test_label)
    g_train = model.param_grad(params, z_train, kind)
    return _cos(g_train, g_test)


def _cos(g_train: np.ndarray, g_test: np.ndarray) -> float:
    nt = _checked_norm(g_test, "test")
    ntr = _checked_norm(g_train, "train")
    return float(g_train @ g_test) / (ntr * nt)


def grad_effect(
    model: Model,
    params: ParamVector,
    z_train: LabeledExample,
    z_test: LabeledExample,
    epsilon: float = 1e-3,
    kind: str = "cross-entropy",
    test_label: str = "true",
) -> float:
    """Predicted test-loss change from one step of size epsilon on z_train.

    The step is theta -> theta - epsilon g_train / ||g_train||^2, i.e. a step
    that reduces the training example's loss by about epsilon. Negative
    output means the test loss is predicted to drop.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g_test = query_gradient(model, params, z_test, kind, test_label)
    g_train = model.param_grad(params, z_train, kind)
    _checked_norm(g_test, "test")
    ntr = _checked_norm(g_train, "train")
    return -epsilon * float(g_test @ g_train) / ntr**2


@dataclass
class DampedHessian:
    """Dense symmetric Hessian of the mean training loss, plus damping.

    lambda_damp may stay None until a solve is requested; factorizations are
    cached per damping value.
    """

    matrix: np.ndarray
    lambda_damp: float | None = None
    _factors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("Hessian must be square")
        asym = np.abs(self.matrix - self.matrix.T).max() if self.matrix.size else 0.0
        if asym > 1e-8:
            raise ValueError(f"Hessian asymmetry {asym:.3e} too large")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def default_damping(self) -> float:
        """1e-3 * trace(H) / p; a scale-aware floor for the solves."""
        return 1e-3 * float(np.trace(self.matrix)) / self.dim

    def solve(self, v: np.ndarray, lam: float | None = None) -> np.ndarray:
        """(H + lam I)^-1 v by Cholesky; raises if not positive definite."""
        lam = self._resolve_lam(lam)
        factor = self._factors.get(lam)
        if factor is None:
            try:
                factor = cho_factor(self.matrix + lam * np.eye(self.dim))
            except LinAlgError:
                smallest = float(eigvalsh(self.matrix, subset_by_index=[0, 0])[0])
                raise InsufficientDampingError(lam, smallest + lam) from None
            self._factors[lam] = factor
        return cho_solve(factor, v)

    def _resolve_lam(self, lam: float | None) -> float:
        if lam is None:
            lam = self.lambda_damp if self.lambda_damp is not None else self.default_damping()
        return float(lam)


def dense_hessian(
    model: Model,
    params: ParamVector,
    dataset: Dataset,
    kind: str = "cross-entropy",
    max_params: int = 20_000,
) -> DampedHessian:
    """Hessian of the mean loss over the dataset, column by column.

    Each column j is the gradient of (gradient of the mean loss)_j, obtained
    by differentiating through the recorded backward pass. The result is
    symmetrized; the raw asymmetry is a few ulps of roundoff.
    """
    p = model.num_params
    if p > max_params:
        raise ValueError(f"{p} parameters exceeds the dense-Hessian cap {max_params}")
    X = dataset.X
    y = dataset.y
    H = np.empty((p, p))
    for j in range(p):
        graph = ad.Graph()
        theta = graph.leaf(params.data)
        loss = model.record_batch_loss(theta, graph.constant(X), y, kind)
        (g,) = ad.backward(loss, [theta])
        gj = ad.take(g, np.array([j]))
        H[:, j] = ad.grad(gj, theta)
    return DampedHessian((H + H.T) / 2.0)


def influence_function(
    hessian: DampedHessian,
    g_train: np.ndarray,
    g_test: np.ndarray,
    lam: float | None = None,
) -> float:
    """-g_test' (H + lam I)^-1 g_train.

    This is the first-order change in test loss per unit of upweighting of
    the training example: negative output = helpful example.
    """
    return -float(np.asarray(g_test) @ hessian.solve(np.asarray(g_train), lam))


def relatif(
    hessian: DampedHessian,
    g_train: np.ndarray,
    g_test: np.ndarray,
    lam: float | None = None,
) -> float:
    """Influence normalized by the parameter-space response to the example.

    Dividing by ||(H + lam I)^-1 g_train|| removes the advantage of
    large-gradient (typically high-loss or outlier) training examples.
    """
    g_train = np.asarray(g_train)
    v = hessian.solve(g_train, lam)
    nv = float(np.linalg.norm(v))
    if nv <= DEGENERATE_NORM:
        raise DegenerateGradientError("train", nv)
    return -float(np.asarray(g_test) @ v) / nv


@dataclass(frozen=True)
class AttributionRecord:
    train_index: int
    test_index: int
    method: str
    score: float


@dataclass
class RankingResult:
    """Records sorted most-helpful-first, plus indices skipped as degenerate."""

    records: list
    skipped: list

    def helpful(self, r: int) -> list:
        return self.records[:r]

    def harmful(self, r: int) -> list:
        return list(reversed(self.records[-r:] if r else []))


def rank_training_set(
    model: Model,
    params: ParamVector,
    dataset: Dataset,
    z_test: LabeledExample,
    method: str = "grad-cos",
    *,
    test_index: int = -1,
    epsilon: float = 1e-3,
    hessian: DampedHessian | None = None,
    lam: float | None = None,
    kind: str = "cross-entropy",
    test_label: str = "true",
) -> RankingResult:
    """Score every training example against one test example and sort.

    Scores are oriented so that positive = helpful for every method; for the
    loss-change-convention methods (grad-effect, influence, relatif) that
    means the raw value is negated before ranking. Sorting is by descending
    score with ties broken by ascending train index. Training examples whose
    gradient is degenerate are skipped with a warning, not fatal; a
    degenerate test gradient is an error.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if method in ("influence", "relatif") and hessian is None:
        raise ValueError(f"{method} needs a precomputed dense Hessian")
    g_test = query_gradient(model, params, z_test, kind, test_label)
    _checked_norm(g_test, "test")

    records = []
    skipped = []
    for i in range(len(dataset)):
        g_train = model.param_grad(params, dataset.example(i), kind)
        ntr = float(np.linalg.norm(g_train))
        if ntr <= DEGENERATE_NORM:
            skipped.append(i)
            continue
        if method == "grad-cos":
            score = _cos(g_train, g_test)
        elif method == "grad-effect":
            score = epsilon * float(g_test @ g_train) / ntr**2
        elif method == "influence":
            score = -influence_function(hessian, g_train, g_test, lam)
        else:
            score = -relatif(hessian, g_train, g_test, lam)
        records.append(AttributionRecord(i, test_index, method, float(score)))

    if skipped:
        warnings.warn(
            f"skipped {len(skipped)} training examples with degenerate gradients",
            RuntimeWarning,
            stacklevel=2,
        )
    records.sort(key=lambda r: (-r.score, r.train_index))
    return RankingResult(records, skipped)
