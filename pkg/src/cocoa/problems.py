"""Objective pieces for ``O_A(alpha) = f(A alpha) + sum_i g_i(alpha_i)``.

The dual objective is ``O_B(w) = f*(w) + sum_i g_i*(-x_i^T w)`` and the two
are tied together by ``w(alpha) = grad f(A alpha)``.

Smooth terms (``f``):

* ``least-squares``  ``1/2 ||v - b||^2``
* ``logistic``       ``sum_j log(1 + exp(-b_j v_j))``
* ``elastic-net-conjugate``  conjugate of ``l1 ||w||_1 + l2/2 ||w||^2``; used
  by the dual variant, where the regularizer becomes ``f*``.

Separable terms (``g_i``): ``elastic-net``, ``l1-bounded``, ``l2`` for the
primal variant, and ``hinge-dual``, ``absdev-dual``, ``squared-dual`` which
are the conjugates of per-example losses for the dual variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import _kernels as K
from .data import FEATURES_AS_COLUMNS, SAMPLES_AS_COLUMNS, ColumnMatrix, Dataset

PRIMAL = "primal"
DUAL = "dual"
CASE_I, CASE_II, CASE_III = "I", "II", "III"

GAP_CLAMP = 1e-9
DOMAIN_RTOL = 1e-12


class UnsupportedCaseError(ValueError):
    """The loss/regularizer pair falls outside every supported case."""


class InvariantViolation(RuntimeError):
    """A mathematical invariant failed beyond floating-point tolerance."""


class ConsistencyError(RuntimeError):
    """Maintained shared vector disagrees with ``A alpha``."""


# ---------------------------------------------------------------------------
# smooth term


@dataclass(frozen=True)
class SmoothTerm:
    kind: str
    labels: np.ndarray | None = None
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in ("least-squares", "logistic", "elastic-net-conjugate"):
            raise ValueError(f"unknown smooth term {self.kind!r}")
        if self.kind == "elastic-net-conjugate" and not self.l2 > 0:
            raise ValueError("conjugate regularizer needs a positive l2 weight")
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))

    @classmethod
    def least_squares(cls, b) -> "SmoothTerm":
        return cls("least-squares", b)

    @classmethod
    def logistic(cls, b) -> "SmoothTerm":
        return cls("logistic", b)

    @classmethod
    def regularizer_conjugate(cls, l1: float, l2: float) -> "SmoothTerm":
        return cls("elastic-net-conjugate", None, float(l1), float(l2))

    @property
    def tau(self) -> float:
        """f is (1/tau)-smooth."""
        if self.kind == "elastic-net-conjugate":
            return self.l2
        return 1.0

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.labels is not None and v.shape != self.labels.shape:
            raise ValueError(f"dimension mismatch: {v.shape} vs labels {self.labels.shape}")
        return v

    def value(self, v) -> float:
        v = self._check(v)
        if self.kind == "least-squares":
            r = v - self.labels
            return 0.5 * float(r @ r)
        if self.kind == "logistic":
            return float(np.sum(np.logaddexp(0.0, -self.labels * v)))
        s = np.maximum(np.abs(v) - self.l1, 0.0)
        return float(s @ s) / (2.0 * self.l2)

    def grad(self, v) -> np.ndarray:
        v = self._check(v)
        if self.kind == "least-squares":
            return v - self.labels
        if self.kind == "logistic":
            b = self.labels
            return -b * expit(-b * v)
        return np.sign(v) * np.maximum(np.abs(v) - self.l1, 0.0) / self.l2

    def conjugate(self, w) -> float:
        w = self._check(w)
        if self.kind == "least-squares":
            return 0.5 * float(w @ w) + float(w @ self.labels)
        if self.kind == "logistic":
            s = -self.labels * w
            if np.any(s < 0.0) or np.any(s > 1.0):
                return np.inf
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = np.where(s > 0, s * np.log(s), 0.0) + np.where(s < 1, (1 - s) * np.log1p(-s), 0.0)
            return float(np.sum(ent))
        return self.l1 * float(np.abs(w).sum()) + 0.5 * self.l2 * float(w @ w)

    def prox_conjugate(self, z, t: float) -> np.ndarray:
        """``argmin_w f*(w) + ||w - z||^2 / (2 t)``."""
        z = self._check(z)
        if self.kind == "least-squares":
            return (z - t * self.labels) / (1.0 + t)
        if self.kind == "elastic-net-conjugate":
            return np.sign(z) * np.maximum(np.abs(z) - t * self.l1, 0.0) / (1.0 + t * self.l2)
        raise NotImplementedError("no closed-form prox for the logistic conjugate")

    def zero_value(self, d: int) -> float:
        return self.value(np.zeros(d))


def f_value_grad(smooth: SmoothTerm, v) -> tuple[float, np.ndarray]:
    return smooth.value(v), smooth.grad(v)


def map_w(smooth: SmoothTerm, v) -> np.ndarray:
    """Primal-dual map ``w = grad f(v)``; the residual for least squares."""
    return smooth.grad(v)


# ---------------------------------------------------------------------------
# separable term

_SEP_CODES = {
    "elastic-net": K.CODE_ELASTIC_NET,
    "l2": K.CODE_ELASTIC_NET,
    "l1-bounded": K.CODE_L1_BOUNDED,
    "hinge-dual": K.CODE_HINGE_DUAL,
    "absdev-dual": K.CODE_ABSDEV_DUAL,
    "squared-dual": K.CODE_SQUARED_DUAL,
}
_LABELLED = ("hinge-dual", "absdev-dual", "squared-dual")


@dataclass(frozen=True)
class SeparableTerm:
    """A shared per-coordinate rule plus per-coordinate labels.

    ``l1``/``l2`` are the absolute weights of ``|a|`` and ``a^2/2``; for the
    dual kinds ``bound`` is the box half-width (``1/n`` with ERM averaging)
    and ``labels`` holds ``y_i`` (or ``b_i``).
    """

    kind: str
    l1: float = 0.0
    l2: float = 0.0
    bound: float = np.inf
    labels: np.ndarray | None = None
    lam: float | None = None
    eta: float | None = None

    def __post_init__(self):
        if self.kind not in _SEP_CODES:
            raise ValueError(f"unknown separable term {self.kind!r}")
        # B = 0 is legitimate: f(0)/lambda vanishes when the labels do
        if self.l1 < 0 or self.l2 < 0 or not self.bound >= 0:
            raise ValueError("weights and bound must be non-negative")
        if self.kind in _LABELLED:
            if self.labels is None:
                raise ValueError(f"{self.kind} needs labels")
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))

    # constructors ---------------------------------------------------------

    @classmethod
    def elastic_net(cls, lam: float, eta: float) -> "SeparableTerm":
        if not 0.0 <= eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        return cls("elastic-net", l1=eta * lam, l2=(1.0 - eta) * lam, lam=lam, eta=eta)

    @classmethod
    def l2_reg(cls, lam: float) -> "SeparableTerm":
        return cls("l2", l2=lam, lam=lam)

    @classmethod
    def l1_bounded(cls, lam: float, bound: float) -> "SeparableTerm":
        return cls("l1-bounded", l1=lam, bound=bound, lam=lam)

    @classmethod
    def hinge_dual(cls, y, n: int | None = None) -> "SeparableTerm":
        y = np.asarray(y, dtype=np.float64)
        return cls("hinge-dual", bound=1.0 / (n or y.size), labels=y)

    @classmethod
    def absdev_dual(cls, y, n: int | None = None) -> "SeparableTerm":
        y = np.asarray(y, dtype=np.float64)
        return cls("absdev-dual", bound=1.0 / (n or y.size), labels=y)

    @classmethod
    def squared_dual(cls, b) -> "SeparableTerm":
        return cls("squared-dual", labels=b)

    # properties ------------------------------------------------------------

    @property
    def code(self) -> int:
        return _SEP_CODES[self.kind]

    @property
    def mu(self) -> float:
        if self.kind in ("elastic-net", "l2"):
            return self.l2
        if self.kind == "squared-dual":
            return 1.0
        return 0.0

    def label_array(self, n: int) -> np.ndarray:
        if self.labels is None:
            return np.zeros(n)
        return self.labels

    def take(self, idx) -> "SeparableTerm":
        if self.labels is None:
            return self
        return replace(self, labels=self.labels[np.asarray(idx, dtype=np.int64)])

    # evaluation ------------------------------------------------------------

    def values(self, a) -> np.ndarray:
        """Per-coordinate ``g_i(a_i)`` (``+inf`` outside the domain)."""
        a = np.asarray(a, dtype=np.float64)
        k = self.kind
        if k in ("elastic-net", "l2"):
            return self.l1 * np.abs(a) + 0.5 * self.l2 * a * a
        # domain checks allow a few ulps: alpha + (z - alpha) need not round back to z
        tol = DOMAIN_RTOL * self.bound
        if k == "l1-bounded":
            return np.where(np.abs(a) <= self.bound + tol, self.l1 * np.abs(a), np.inf)
        y = self.labels
        if k == "squared-dual":
            return 0.5 * a * a - a * y
        if k == "hinge-dual":
            s = a * y
            ok = (s >= -tol) & (s <= self.bound + tol)
        else:
            ok = np.abs(a) <= self.bound + tol
        return np.where(ok, -a * y, np.inf)

    def total(self, a) -> float:
        return float(np.sum(self.values(a)))

    def conjugates(self, x) -> np.ndarray:
        """Per-coordinate ``g_i*(x_i)``."""
        x = np.asarray(x, dtype=np.float64)
        k = self.kind
        if k in ("elastic-net", "l2"):
            s = np.maximum(np.abs(x) - self.l1, 0.0)
            if self.l2 > 0:
                return s * s / (2.0 * self.l2)
            return np.where(s > 0, np.inf, 0.0)
        if k == "l1-bounded":
            return self.bound * np.maximum(np.abs(x) - self.l1, 0.0)
        y = self.labels
        if k == "squared-dual":
            return 0.5 * (x + y) ** 2
        if k == "hinge-dual":
            return self.bound * np.maximum(0.0, 1.0 + y * x)
        return self.bound * np.abs(x + y)

    def argmin_1d(self, q, r, z0=None) -> np.ndarray:
        """Exact minimizer of ``q/2 z^2 - r z + g_i(z)`` per coordinate."""
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        q = np.broadcast_to(np.asarray(q, dtype=np.float64), r.shape).copy()
        z0 = np.zeros_like(r) if z0 is None else np.broadcast_to(np.asarray(z0, dtype=np.float64), r.shape).copy()
        y = self.label_array(r.size)
        return K.coord_argmin_many(self.code, q, r, np.ascontiguousarray(y, dtype=np.float64),
                                   self.l1, self.l2, self.bound, z0)

    def prox(self, y, step: float) -> np.ndarray:
        """``prox_{step g}(y)``, coordinate-wise."""
        y = np.asarray(y, dtype=np.float64)
        if step == 0:
            return y.copy()
        return self.argmin_1d(1.0 / step, y / step, y)


def g_value(sep: SeparableTerm, i: int, a: float) -> float:
    return float(sep.take([i]).values([a])[0]) if sep.labels is not None else float(sep.values([a])[0])


def g_conjugate(sep: SeparableTerm, i: int, x: float) -> float:
    return float(sep.take([i]).conjugates([x])[0]) if sep.labels is not None else float(sep.conjugates([x])[0])


# ---------------------------------------------------------------------------
# problem instance


@dataclass(frozen=True)
class ProblemInstance:
    """``(f, {g_i})`` over a column matrix, tagged with its case and variant.

    ``scale`` holds per-feature normalization factors (features are divided
    by them) so that models can be reported in input coordinates.
    """

    smooth: SmoothTerm
    separable: SeparableTerm
    matrix: ColumnMatrix
    variant: str = PRIMAL
    case: str = CASE_II
    scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.case, self.variant) in ((CASE_II, DUAL), (CASE_III, PRIMAL)):
            raise UnsupportedCaseError(f"case {self.case} cannot run the {self.variant} variant")
        d, n = self.matrix.shape
        if self.smooth.labels is not None and self.smooth.labels.shape != (d,):
            raise ValueError(f"smooth-term labels must have length d={d}")
        if self.separable.labels is not None and self.separable.labels.shape != (n,):
            raise ValueError(f"separable labels must have length n={n}")

    @property
    def d(self) -> int:
        return self.matrix.n_rows

    @property
    def n(self) -> int:
        return self.matrix.n_cols

    @property
    def tau(self) -> float:
        return self.smooth.tau

    def shared_vector(self, alpha) -> np.ndarray:
        return self.matrix.matvec(alpha)

    def model(self, alpha, v=None) -> np.ndarray:
        """The input-problem solution: ``alpha`` (primal) or ``w(alpha)`` (dual)."""
        alpha = np.asarray(alpha, dtype=np.float64)
        if self.variant == PRIMAL:
            u = alpha
        else:
            u = map_w(self.smooth, self.shared_vector(alpha) if v is None else v)
        return u if self.scale is None else u / self.scale


def objective_A(problem: ProblemInstance, alpha, v=None, audit: bool = False) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    if v is None:
        v = problem.shared_vector(alpha)
    elif audit:
        exact = problem.shared_vector(alpha)
        if np.max(np.abs(exact - v), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(exact), initial=0.0)):
            raise ConsistencyError("shared vector v drifted from A alpha")
    return problem.smooth.value(v) + problem.separable.total(alpha)


def objective_B(problem: ProblemInstance, w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return problem.smooth.conjugate(w) + float(np.sum(problem.separable.conjugates(-problem.matrix.rmatvec(w))))


@dataclass(frozen=True)
class GapReport:
    gap: float
    raw: float
    objective_A: float
    objective_B: float


def gap_from_objectives(obj_a: float, obj_b: float) -> GapReport:
    raw = obj_a + obj_b
    if raw < -GAP_CLAMP:
        raise InvariantViolation(f"negative duality gap {raw:.3e}: conjugate pair is inconsistent")
    return GapReport(max(raw, 0.0), raw, obj_a, obj_b)


def duality_gap(problem: ProblemInstance, alpha, v=None, report: bool = False):
    """``O_A(alpha) + O_B(w(alpha))``; tiny negatives are clamped to zero."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if v is None:
        v = problem.shared_vector(alpha)
    w = map_w(problem.smooth, v)
    rep = gap_from_objectives(objective_A(problem, alpha, v), objective_B(problem, w))
    return rep if report else rep.gap


# ---------------------------------------------------------------------------
# case mapping


def choose_variant(loss_smooth: bool, reg_strongly_convex: bool, loss_separable: bool = True,
                   reg_separable: bool = True, d: int = 0, n: int = 0,
                   override: str | None = None) -> tuple[str, str]:
    """Map loss/regularizer properties to ``(case, variant)``.

    ``d`` is the number of features and ``n`` the number of training points
    of the input problem. In case I the primal variant is chosen when
    features outnumber points (its per-round vector has one entry per
    point); ties go to the dual variant.
    """
    if loss_smooth and reg_strongly_convex:
        case = CASE_I
        variant = PRIMAL if d > n else DUAL
        if override is not None:
            if override not in (PRIMAL, DUAL):
                raise ValueError(f"unknown variant {override!r}")
            variant = override
        if variant == PRIMAL and not reg_separable:
            raise UnsupportedCaseError("primal variant needs a separable regularizer")
        if variant == DUAL and not loss_separable:
            raise UnsupportedCaseError("dual variant needs a separable loss")
        return case, variant
    if loss_smooth and not reg_strongly_convex:
        if not reg_separable:
            raise UnsupportedCaseError("non-strongly convex regularizer must be separable")
        case, variant = CASE_II, PRIMAL
    elif reg_strongly_convex:
        if not loss_separable:
            raise UnsupportedCaseError("non-smooth loss must be separable")
        case, variant = CASE_III, DUAL
    else:
        raise UnsupportedCaseError("non-smooth loss with non-strongly convex regularizer")
    if override is not None and override != variant:
        raise UnsupportedCaseError(f"case {case} only supports the {variant} variant")
    return case, variant


LOSSES = {
    # name: (smooth, separable)
    "least-squares": (True, True),
    "logistic": (True, True),
    "hinge": (False, True),
    "absdev": (False, True),
}


@dataclass(frozen=True)
class Regularizer:
    kind: str               # "l1", "elastic-net", "l2"
    lam: float
    eta: float = 1.0
    smoothing: float = 0.0  # extra (delta/2) a^2

    def __post_init__(self):
        if self.kind not in ("l1", "elastic-net", "l2"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.smoothing < 0:
            raise ValueError("smoothing delta must be non-negative")

    @property
    def weights(self) -> tuple[float, float]:
        """Absolute ``(l1, l2)`` weights including smoothing."""
        if self.kind == "l1":
            l1, l2 = self.lam, 0.0
        elif self.kind == "l2":
            l1, l2 = 0.0, self.lam
        else:
            l1, l2 = self.eta * self.lam, (1.0 - self.eta) * self.lam
        return l1, l2 + self.smoothing

    @property
    def strongly_convex(self) -> bool:
        return self.weights[1] > 0


def build_problem(loss: str, reg: Regularizer, dataset: Dataset, variant: str | None = None,
                  bound: float | None = None, normalize: bool = False) -> ProblemInstance:
    """Map ``loss + reg`` on ``dataset`` to objective (A) via the case table.

    With ``normalize`` every feature with norm above one is rescaled; the
    returned problem records the factors in ``scale``.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    loss_smooth, loss_sep = LOSSES[loss]
    feats = dataset.oriented(FEATURES_AS_COLUMNS)
    scale = None
    X = feats.matrix
    if normalize:
        from .data import normalize_columns
        X, scale = normalize_columns(X)
    case, variant = choose_variant(loss_smooth, reg.strongly_convex, loss_sep, True,
                                   d=X.n_cols, n=X.n_rows, override=variant)
    l1, l2 = reg.weights
    y = feats.labels
    if loss in ("hinge", "logistic"):
        feats.check_classification()
    meta = {"loss": loss, "reg": reg, "n_samples": X.n_rows, "n_features": X.n_cols}
    if variant == PRIMAL:
        if loss == "least-squares":
            smooth = SmoothTerm.least_squares(y)
        elif loss == "logistic":
            smooth = SmoothTerm.logistic(y)
        else:
            raise UnsupportedCaseError(f"{loss} loss cannot be the smooth term")
        if l2 > 0:
            sep = SeparableTerm("elastic-net" if l1 > 0 else "l2", l1=l1, l2=l2, lam=reg.lam, eta=reg.eta)
        else:
            if bound is None:
                bound = smooth.zero_value(X.n_rows) / l1
            sep = SeparableTerm.l1_bounded(l1, bound)
        return ProblemInstance(smooth, sep, X, PRIMAL, case, scale, meta)
    A = X.transpose()
    smooth = SmoothTerm.regularizer_conjugate(l1, l2)
    if loss == "least-squares":
        sep = SeparableTerm.squared_dual(y)
    elif loss == "hinge":
        sep = SeparableTerm.hinge_dual(y)
    elif loss == "absdev":
        sep = SeparableTerm.absdev_dual(y)
    else:
        raise UnsupportedCaseError(f"{loss} loss has no shipped dual-variant solver")
    return ProblemInstance(smooth, sep, A, DUAL, case, scale, meta)


def input_objective(problem: ProblemInstance, u) -> float:
    """Original ``loss(Xu) + reg(u)`` for a model ``u`` in the problem's scaled coordinates."""
    loss = problem.meta["loss"]
    reg: Regularizer = problem.meta["reg"]
    if problem.variant == PRIMAL:
        X = problem.matrix
        y = problem.smooth.labels
    else:
        X = problem.matrix.transpose()
        y = problem.separable.labels
    z = X.matvec(u)
    if loss == "least-squares":
        lv = 0.5 * float(np.sum((z - y) ** 2))
    elif loss == "logistic":
        lv = float(np.sum(np.logaddexp(0.0, -y * z)))
    elif loss == "hinge":
        lv = float(np.mean(np.maximum(0.0, 1.0 - y * z)))
    else:
        lv = float(np.mean(np.abs(z - y)))
    l1, l2 = reg.weights
    return lv + l1 * float(np.abs(u).sum()) + 0.5 * l2 * float(u @ u)


def smoothing_wrap(problem: ProblemInstance, delta: float) -> ProblemInstance:
    """Replace ``lam |a|`` by ``lam |a| + (delta/2) a^2`` (strong convexity ``delta``)."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return problem
    sep = problem.separable
    if sep.kind not in ("l1-bounded", "elastic-net"):
        raise ValueError("smoothing applies to an L1 regularizer")
    new = SeparableTerm("elastic-net", l1=sep.l1, l2=sep.l2 + delta, lam=sep.lam, eta=sep.eta)
    meta = dict(problem.meta)
    if "reg" in meta:
        meta["reg"] = replace(meta["reg"], smoothing=meta["reg"].smoothing + delta)
    return replace(problem, separable=new, case=CASE_I, meta=meta)
