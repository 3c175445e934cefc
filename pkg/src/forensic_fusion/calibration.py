"""Post-hoc calibration maps, reliability metrics and expert profiles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-6
DEFAULT_ECE_BINS = 15
DEFAULT_HISTOGRAM_BINS = 10
TEMPERATURE_BOUNDS = (0.05, 20.0)
TEMPERATURE_TOL = 1e-4
NEWTON_MAX_ITER = 200
NEWTON_GRAD_TOL = 1e-8
WELL_CALIBRATED_ECE = 0.05
MODERATELY_CALIBRATED_ECE = 0.15


class DegenerateFitError(ValueError):
    """Training data cannot identify a parametric calibration map."""


class Method(str, Enum):
    TEMPERATURE = "temperature"
    PLATT = "platt"
    ISOTONIC = "isotonic"
    HISTOGRAM = "histogram"
    BETA = "beta"
    IDENTITY = "identity"


# Fixed order used to break exact ECE ties during selection.
SELECTION_ORDER = (
    Method.TEMPERATURE,
    Method.PLATT,
    Method.ISOTONIC,
    Method.HISTOGRAM,
    Method.BETA,
    Method.IDENTITY,
)
FITTED_METHODS = SELECTION_ORDER[:5]


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, EPS, 1.0 - EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _nll(z: np.ndarray, y: np.ndarray) -> float:
    # -sum[y log s(z) + (1-y) log(1-s(z))], written with logaddexp for stability
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


@dataclass(frozen=True)
class CalibrationModel:
    """A fitted calibration map stored as a method tag plus a flat parameter array.

    Parameter layout per method:

    * temperature: ``(T,)``
    * platt: ``(a, b)`` for ``sigmoid(a * logit(p) + b)``
    * beta: ``(a, b, c)`` for ``sigmoid(a * ln p - b * ln(1 - p) + c)``
    * isotonic: ``(x_1..x_m, y_1..y_m)`` breakpoints then fitted values
    * histogram: ``(e_0..e_B, m_1..m_B)`` bin edges then bin means
    * identity: ``()``
    """

    method: Method
    params: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if not all(math.isfinite(p) for p in params):
            raise ValueError(f"{self.method.value} parameters must be finite")
        m = self.method
        if m is Method.TEMPERATURE:
            if len(params) != 1 or params[0] <= 0:
                raise ValueError("temperature model needs a single T > 0")
        elif m is Method.PLATT:
            if len(params) != 2:
                raise ValueError("platt model needs (a, b)")
        elif m is Method.BETA:
            if len(params) != 3:
                raise ValueError("beta model needs (a, b, c)")
        elif m is Method.ISOTONIC:
            if len(params) < 2 or len(params) % 2:
                raise ValueError("isotonic model needs paired breakpoints and values")
            x, y = self._isotonic_arrays()
            if np.any(np.diff(x) < 0) or np.any(np.diff(y) < 0):
                raise ValueError("isotonic breakpoints and values must be non-decreasing")
        elif m is Method.HISTOGRAM:
            if len(params) < 3 or len(params) % 2 == 0:
                raise ValueError("histogram model needs B+1 edges and B means")
            _, means = self._histogram_arrays()
            if np.any(means < 0) or np.any(means > 1):
                raise ValueError("histogram bin means must lie in [0, 1]")
        elif params:
            raise ValueError("identity model takes no parameters")

    # -- constructors ---------------------------------------------------------

    @classmethod
    def identity(cls) -> "CalibrationModel":
        return cls(Method.IDENTITY)

    @classmethod
    def temperature(cls, t: float) -> "CalibrationModel":
        return cls(Method.TEMPERATURE, (t,))

    @classmethod
    def platt(cls, a: float, b: float) -> "CalibrationModel":
        return cls(Method.PLATT, (a, b))

    @classmethod
    def beta(cls, a: float, b: float, c: float) -> "CalibrationModel":
        return cls(Method.BETA, (a, b, c))

    @classmethod
    def isotonic(cls, breakpoints: Sequence[float], values: Sequence[float]) -> "CalibrationModel":
        return cls(Method.ISOTONIC, tuple(breakpoints) + tuple(values))

    @classmethod
    def histogram(cls, edges: Sequence[float], means: Sequence[float]) -> "CalibrationModel":
        return cls(Method.HISTOGRAM, tuple(edges) + tuple(means))

    def _isotonic_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        m = len(self.params) // 2
        return np.array(self.params[:m]), np.array(self.params[m:])

    def _histogram_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        b = (len(self.params) - 1) // 2
        return np.array(self.params[: b + 1]), np.array(self.params[b + 1 :])

    # -- application ----------------------------------------------------------

    def transform(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=float)
        if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
            raise ValueError("raw scores must be probabilities in [0, 1]")
        m = self.method
        if m is Method.IDENTITY:
            return s.copy()
        if m is Method.TEMPERATURE:
            return _sigmoid(_logit(s) / self.params[0])
        if m is Method.PLATT:
            a, b = self.params
            return _sigmoid(a * _logit(s) + b)
        if m is Method.BETA:
            a, b, c = self.params
            p = np.clip(s, EPS, 1.0 - EPS)
            return _sigmoid(a * np.log(p) - b * np.log1p(-p) + c)
        if m is Method.ISOTONIC:
            x, y = self._isotonic_arrays()
            return np.interp(s, x, y)
        edges, means = self._histogram_arrays()
        return means[_bin_index(s, edges)]

    def to_dict(self) -> dict:
        return {"method": self.method.value, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationModel":
        return cls(Method(d["method"]), tuple(d["params"]))


def apply_calibration(model: CalibrationModel, raw_score: float) -> float:
    return float(model.transform(np.array([raw_score]))[0])


def _bin_index(scores: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # left-closed bins, the last one right-closed
    return np.searchsorted(edges[1:-1], scores, side="right")


# -- fitting -------------------------------------------------------------------


def _as_xy(train: Iterable[tuple[float, int]]) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(train)
    if not pairs:
        raise ValueError("calibration training set is empty")
    s = np.array([float(p[0]) for p in pairs])
    y = np.array([float(p[1]) for p in pairs])
    if np.any(s < 0) or np.any(s > 1) or np.any(~np.isfinite(s)):
        raise ValueError("raw scores must be probabilities in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return s, y


def _single_class(y: np.ndarray) -> bool:
    return bool(np.all(y == y[0]))


def golden_section(f, lo: float, hi: float, tol: float) -> float:
    """Minimise a unimodal scalar function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(s: np.ndarray, y: np.ndarray) -> CalibrationModel:
    z = _logit(s)
    t = golden_section(lambda t: _nll(z / t, y), *TEMPERATURE_BOUNDS, TEMPERATURE_TOL)
    return CalibrationModel.temperature(t)


def newton_logistic(
    x: np.ndarray,
    y: np.ndarray,
    w0: np.ndarray,
    active: np.ndarray | None = None,
    max_iter: int = NEWTON_MAX_ITER,
    grad_tol: float = NEWTON_GRAD_TOL,
) -> np.ndarray:
    """Damped Newton on the logistic NLL; inactive coefficients stay pinned at zero."""
    w = np.array(w0, dtype=float)
    if active is None:
        active = np.ones(w.size, dtype=bool)
    w[~active] = 0.0
    xa = x[:, active]
    n = len(y)
    loss = _nll(x @ w, y)
    for _ in range(max_iter):
        p = _sigmoid(x @ w)
        grad = xa.T @ (p - y) / n
        if np.linalg.norm(grad) < grad_tol:
            break
        h = (xa * (p * (1 - p))[:, None]).T @ xa / n
        h += 1e-12 * np.eye(h.shape[0])
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        improved = False
        for _ in range(40):
            cand = w.copy()
            cand[active] -= t * step
            cand_loss = _nll(x @ cand, y)
            if cand_loss <= loss:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        converged = loss - cand_loss < 1e-15 * max(1.0, abs(loss))
        w, loss = cand, cand_loss
        if converged:
            break
    return w


def fit_platt(s: np.ndarray, y: np.ndarray) -> CalibrationModel:
    z = _logit(s)
    x = np.column_stack([z, np.ones_like(z)])
    a, b = newton_logistic(x, y, np.array([1.0, 0.0]))
    return CalibrationModel.platt(a, b)


def fit_beta(s: np.ndarray, y: np.ndarray) -> CalibrationModel:
    p = np.clip(s, EPS, 1.0 - EPS)
    x = np.column_stack([np.log(p), -np.log1p(-p), np.ones_like(p)])
    active = np.ones(3, dtype=bool)
    w = newton_logistic(x, y, np.array([1.0, 1.0, 0.0]), active)
    # a, b >= 0: drop a negative shape coefficient and refit, at most twice
    for _ in range(2):
        negative = [i for i in (0, 1) if active[i] and w[i] < 0]
        if not negative:
            break
        active[min(negative, key=lambda i: w[i])] = False
        w = newton_logistic(x, y, np.where(active, w, 0.0), active)
    w[:2] = np.maximum(w[:2], 0.0)
    return CalibrationModel.beta(*w)


def pava(y: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Least-squares non-decreasing fit by pooling adjacent violators."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n == 0:
        return y.copy()
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape or np.any(w <= 0):
        raise ValueError("weights must be positive and match y")
    # block stack: (weighted sum, weight, length)
    sums, wts, lens = [], [], []
    for i in range(n):
        sums.append(y[i] * w[i])
        wts.append(w[i])
        lens.append(1)
        while len(sums) > 1 and sums[-2] / wts[-2] > sums[-1] / wts[-1]:
            s, wt, ln = sums.pop(), wts.pop(), lens.pop()
            sums[-1] += s
            wts[-1] += wt
            lens[-1] += ln
    return np.repeat([s / wt for s, wt in zip(sums, wts)], lens)


def fit_isotonic(s: np.ndarray, y: np.ndarray) -> CalibrationModel:
    xs, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ymeans = np.bincount(inverse, weights=y) / counts
    fitted = pava(ymeans, counts)
    # keep only the end points of each constant run; interpolation is unchanged
    keep = np.ones(xs.size, dtype=bool)
    if xs.size > 2:
        same_prev = np.r_[False, fitted[1:] == fitted[:-1]]
        same_next = np.r_[fitted[:-1] == fitted[1:], False]
        keep = ~(same_prev & same_next)
    return CalibrationModel.isotonic(xs[keep], fitted[keep])


def fit_histogram(s: np.ndarray, y: np.ndarray, n_bins: int = DEFAULT_HISTOGRAM_BINS) -> CalibrationModel:
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = _bin_index(s, edges)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=y, minlength=n_bins)
    filled = np.flatnonzero(counts)
    means = np.empty(n_bins)
    for b in range(n_bins):
        if counts[b]:
            means[b] = sums[b] / counts[b]
        else:
            # nearest non-empty bin, lower index on a tie
            nearest = filled[np.argmin(np.abs(filled - b))]
            means[b] = sums[nearest] / counts[nearest]
    return CalibrationModel.histogram(edges, means)


def _constant_map(method: Method, rate: float) -> CalibrationModel:
    if method is Method.ISOTONIC:
        return CalibrationModel.isotonic([0.0, 1.0], [rate, rate])
    return CalibrationModel.histogram([0.0, 1.0], [rate])


def fit_calibrator(
    method: Method | str,
    train: Iterable[tuple[float, int]],
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS,
) -> CalibrationModel:
    method = Method(method)
    s, y = _as_xy(train)
    if method is Method.IDENTITY:
        return CalibrationModel.identity()
    if _single_class(y):
        if method in (Method.ISOTONIC, Method.HISTOGRAM):
            return _constant_map(method, float(y[0]))
        raise DegenerateFitError(f"{method.value} calibration needs both labels in the training set")
    if method is Method.TEMPERATURE:
        return fit_temperature(s, y)
    if method is Method.PLATT:
        return fit_platt(s, y)
    if method is Method.BETA:
        return fit_beta(s, y)
    if method is Method.ISOTONIC:
        return fit_isotonic(s, y)
    return fit_histogram(s, y, histogram_bins)


# -- reliability metrics -------------------------------------------------------


@dataclass(frozen=True)
class BinStat:
    count: int
    mean_confidence: float
    empirical_accuracy: float


@dataclass(frozen=True)
class ReliabilityMetrics:
    ece: float
    brier: float
    bin_count: int
    per_bin: tuple[BinStat, ...]

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "brier": self.brier,
            "bin_count": self.bin_count,
            "per_bin": [[b.count, b.mean_confidence, b.empirical_accuracy] for b in self.per_bin],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReliabilityMetrics":
        return cls(
            ece=float(d["ece"]),
            brier=float(d["brier"]),
            bin_count=int(d["bin_count"]),
            per_bin=tuple(BinStat(int(c), float(m), float(a)) for c, m, a in d["per_bin"]),
        )


def _paired(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if s.size != y.size:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise ValueError("need at least one score")
    return s, y


def brier_score(scores, labels) -> float:
    s, y = _paired(scores, labels)
    return float(np.mean((s - y) ** 2))


def expected_calibration_error(scores, labels, n_bins: int = DEFAULT_ECE_BINS) -> ReliabilityMetrics:
    """Equal-width binned ECE over the fake-class probability."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    s, y = _paired(scores, labels)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = _bin_index(s, edges)
    n = s.size
    per_bin = []
    ece = 0.0
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            per_bin.append(BinStat(0, 0.0, 0.0))
            continue
        conf = float(s[mask].mean())
        acc = float(y[mask].mean())
        per_bin.append(BinStat(count, conf, acc))
        ece += count / n * abs(acc - conf)
    return ReliabilityMetrics(ece=ece, brier=brier_score(s, y), bin_count=n_bins, per_bin=tuple(per_bin))


def select_best_calibrator(
    candidates: Sequence[CalibrationModel],
    val: Iterable[tuple[float, int]],
    n_bins: int = DEFAULT_ECE_BINS,
) -> CalibrationModel:
    if not candidates:
        raise ValueError("no candidate calibrators")
    s, y = _as_xy(val)
    scored = [
        (expected_calibration_error(c.transform(s), y, n_bins).ece, SELECTION_ORDER.index(c.method), i)
        for i, c in enumerate(candidates)
    ]
    return candidates[min(scored)[2]]


# -- expert profiles -------------------------------------------------------------


def calibration_verdict(ece: float) -> str:
    if ece < WELL_CALIBRATED_ECE:
        return "well calibrated"
    if ece < MODERATELY_CALIBRATED_ECE:
        return "moderately calibrated"
    return "poorly calibrated"


def render_quality_text(method: Method, metrics: ReliabilityMetrics | None) -> str:
    if metrics is None:
        return f"method={method.value}; ECE=n/a; Brier=n/a; verdict=uncalibrated template, treat with caution"
    return (
        f"method={method.value}; ECE={metrics.ece:.4f}; Brier={metrics.brier:.4f}; "
        f"verdict={calibration_verdict(metrics.ece)}"
    )


@dataclass(frozen=True)
class ExpertProfile:
    expert_id: str
    desc_text: str
    quality_text: str
    calibration: CalibrationModel
    metrics: ReliabilityMetrics | None
    is_template: bool = False
    raw_metrics: ReliabilityMetrics | None = None
    candidate_ece: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "candidate_ece", dict(sorted(self.candidate_ece.items())))
        if self.is_template and self.calibration.method is not Method.IDENTITY:
            raise ValueError("template profiles carry the identity calibration")
        if not self.is_template and self.metrics is None:
            raise ValueError("non-template profiles need validation metrics")

    @property
    def ece(self) -> float | None:
        return None if self.metrics is None else self.metrics.ece

    def calibrate(self, raw_score: float) -> float:
        return apply_calibration(self.calibration, raw_score)

    def to_dict(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "desc_text": self.desc_text,
            "quality_text": self.quality_text,
            "calibration": self.calibration.to_dict(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "raw_metrics": None if self.raw_metrics is None else self.raw_metrics.to_dict(),
            "candidate_ece": dict(self.candidate_ece),
            "is_template": self.is_template,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExpertProfile":
        return cls(
            expert_id=d["expert_id"],
            desc_text=d["desc_text"],
            quality_text=d["quality_text"],
            calibration=CalibrationModel.from_dict(d["calibration"]),
            metrics=None if d.get("metrics") is None else ReliabilityMetrics.from_dict(d["metrics"]),
            raw_metrics=None if d.get("raw_metrics") is None else ReliabilityMetrics.from_dict(d["raw_metrics"]),
            candidate_ece={k: float(v) for k, v in (d.get("candidate_ece") or {}).items()},
            is_template=bool(d["is_template"]),
        )


def template_profile(expert_id: str, desc_text: str) -> ExpertProfile:
    identity = CalibrationModel.identity()
    return ExpertProfile(
        expert_id=expert_id,
        desc_text=desc_text,
        quality_text=render_quality_text(identity.method, None),
        calibration=identity,
        metrics=None,
        is_template=True,
    )


def build_expert_profile(
    expert_id: str,
    desc_text: str,
    train: Sequence[tuple[float, int]],
    val: Sequence[tuple[float, int]],
    n_bins: int = DEFAULT_ECE_BINS,
    *,
    train_ids: Iterable[str] | None = None,
    val_ids: Iterable[str] | None = None,
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS,
) -> ExpertProfile:
    """Fit every calibrator on ``train``, pick the lowest validation ECE.

    Calibrators are never refit on ``val``. Degenerate training data (one
    label, or a constant score) yields a template profile instead.
    """
    if train_ids is not None and val_ids is not None:
        overlap = set(train_ids) & set(val_ids)
        if overlap:
            raise ValueError(f"train and val share {len(overlap)} sample ids")
    s_tr, y_tr = _as_xy(train)
    s_va, y_va = _as_xy(val)
    if _single_class(y_tr) or np.all(s_tr == s_tr[0]):
        logger.info("expert %s: degenerate training scores, using template profile", expert_id)
        return template_profile(expert_id, desc_text)

    candidates = [fit_calibrator(m, zip(s_tr, y_tr), histogram_bins) for m in FITTED_METHODS]
    candidate_ece = {
        c.method.value: expected_calibration_error(c.transform(s_va), y_va, n_bins).ece for c in candidates
    }
    best = select_best_calibrator(candidates, zip(s_va, y_va), n_bins)
    metrics = expected_calibration_error(best.transform(s_va), y_va, n_bins)
    return ExpertProfile(
        expert_id=expert_id,
        desc_text=desc_text,
        quality_text=render_quality_text(best.method, metrics),
        calibration=best,
        metrics=metrics,
        is_template=False,
        raw_metrics=expected_calibration_error(s_va, y_va, n_bins),
        candidate_ece=candidate_ece,
    )
