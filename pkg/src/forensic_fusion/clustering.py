"""Per-modality K-means context clusters and cluster-local expert reliability."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import DEFAULT_THRESHOLD, MODALITIES, FeatureVector, f1_acc

logger = logging.getLogger(__name__)

DEFAULT_K = {"clip": 12, "srm": 8, "cfa": 10}
AUTO_K_RANGE = (2, 20)
MAX_LLOYD_ITER = 300
SHIFT_TOL = 1e-8
LOW_SEPARABILITY = 0.1


class ClusteringError(ValueError):
    pass


def as_matrix(features) -> np.ndarray:
    """Stack a list of FeatureVectors (or accept an array) into an (n, d) matrix."""
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=float)
    else:
        features = list(features)
        if features and isinstance(features[0], FeatureVector):
            modalities = {f.modality for f in features}
            if len(modalities) > 1:
                raise ClusteringError(f"mixed modalities {sorted(modalities)}")
            x = np.stack([f.values for f in features])
        else:
            x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ClusteringError("features must form an (n, d) matrix")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # direct differences, no Gram expansion: equidistant ties stay exact
    return cdist(x, c, "sqeuclidean")


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted centroids in standardized feature space.

    ``mean`` and ``scale`` are the train-set standardization applied to any
    vector before assignment.
    """

    modality: str
    k: int
    centroids: np.ndarray
    seed: int
    mean: np.ndarray
    scale: np.ndarray
    labels: np.ndarray | None = None
    inertia_history: tuple[float, ...] = ()

    def __post_init__(self):
        c = np.array(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[0] != self.k or self.k < 1:
            raise ClusteringError("centroid array does not match K")
        if not np.all(np.isfinite(c)):
            raise ClusteringError("centroids must be finite")
        for name in ("centroids", "mean", "scale"):
            arr = c if name == "centroids" else np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=int)
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "inertia_history", tuple(float(v) for v in self.inertia_history))

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def predict(self, features) -> np.ndarray:
        x = as_matrix(features)
        if x.shape[1] != self.dim:
            raise ClusteringError(f"feature dim {x.shape[1]} does not match model dim {self.dim}")
        return np.argmin(_sq_dists(self.standardize(x), self.centroids), axis=1)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "seed": self.seed,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "inertia_history": list(self.inertia_history),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterModel":
        return cls(
            modality=d["modality"],
            k=int(d["k"]),
            centroids=np.array(d["centroids"], dtype=float),
            seed=int(d["seed"]),
            mean=np.array(d["mean"], dtype=float),
            scale=np.array(d["scale"], dtype=float),
            inertia_history=tuple(d.get("inertia_history", ())),
        )

    def __eq__(self, other):
        if not isinstance(other, ClusterModel):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.k == other.k
            and self.seed == other.seed
            and np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.scale, other.scale)
        )

    __hash__ = None


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[float]]:
    k = centroids.shape[0]
    history: list[float] = []
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    for _ in range(MAX_LLOYD_ITER):
        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                new[c] = x[labels == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its centroid
            d = ((x - new[labels]) ** 2).sum(1)
            far = int(np.argmax(d))
            new[c] = x[far]
            labels = labels.copy()
            labels[far] = c
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        if shift < SHIFT_TOL:
            break
    history.append(float(((x - centroids[labels]) ** 2).sum()))
    return centroids, labels, history


def kmeans_fit(
    features,
    k: int,
    seed: int = 42,
    modality: str = "clip",
    n_init: int = 4,
    standardize: bool = True,
) -> ClusterModel:
    """K-means++ seeded Lloyd iterations; best of ``n_init`` restarts by inertia."""
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], FeatureVector):
        modality = features[0].modality
    x_raw = as_matrix(features)
    if k < 1:
        raise ClusteringError("K must be positive")
    n_distinct = np.unique(x_raw, axis=0).shape[0]
    if n_distinct < k:
        raise ClusteringError(f"K={k} exceeds the {n_distinct} distinct points")
    if standardize:
        mean = x_raw.mean(axis=0)
        scale = x_raw.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean = np.zeros(x_raw.shape[1])
        scale = np.ones(x_raw.shape[1])
    x = (x_raw - mean) / scale
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_pp(x, k, rng)
        centroids, labels, history = _lloyd(x, init)
        if best is None or history[-1] < best[2][-1]:
            best = (centroids, labels, history)
    centroids, labels, history = best
    return ClusterModel(
        modality=modality,
        k=k,
        centroids=centroids,
        seed=seed,
        mean=mean,
        scale=scale,
        labels=labels,
        inertia_history=tuple(history),
    )


def inertia_curve(features, k_values: Sequence[int], seed: int = 42, **kwargs) -> list[tuple[int, float]]:
    return [(k, kmeans_fit(features, k, seed, **kwargs).inertia) for k in k_values]


def select_k(curve: Sequence[tuple[int, float]]) -> int:
    """Elbow by peak discrete second difference I(K-1) - 2 I(K) + I(K+1)."""
    curve = sorted((int(k), float(i)) for k, i in curve)
    if len(curve) < 3:
        raise ClusteringError("select_k needs at least three (K, inertia) points")
    ks = [k for k, _ in curve]
    if any(b - a != 1 for a, b in zip(ks, ks[1:])):
        raise ClusteringError("inertia curve must cover consecutive K")
    best_k, best_d = None, None
    for i in range(1, len(curve) - 1):
        d = curve[i - 1][1] - 2 * curve[i][1] + curve[i + 1][1]
        if best_d is None or d > best_d:
            best_k, best_d = curve[i][0], d
    return best_k


def assign_cluster(model: ClusterModel, x) -> int:
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=float).reshape(-1)
    if values.size != model.dim:
        raise ClusteringError(f"feature dim {values.size} does not match model dim {model.dim}")
    return int(model.predict(values[None, :])[0])


# -- quality metrics -------------------------------------------------------------


def silhouette_score(features, assignments, chunk: int = 2048) -> float:
    """Mean silhouette; points in singleton clusters contribute 0."""
    x = as_matrix(features)
    lab = np.asarray(assignments)
    if lab.shape[0] != x.shape[0]:
        raise ClusteringError("assignments must match features")
    clusters, lab = np.unique(lab, return_inverse=True)
    if clusters.size < 2:
        raise ClusteringError("silhouette needs at least two clusters")
    n, kc = x.shape[0], clusters.size
    counts = np.bincount(lab, minlength=kc).astype(float)
    onehot = np.zeros((n, kc))
    onehot[np.arange(n), lab] = 1.0
    total = 0.0
    for start in range(0, n, chunk):
        block = slice(start, min(n, start + chunk))
        d = cdist(x[block], x)
        sums = d @ onehot  # (m, kc): distance sums to each cluster
        own = lab[block]
        rows = np.arange(own.size)
        own_count = counts[own]
        a = np.where(own_count > 1, sums[rows, own] / np.maximum(own_count - 1, 1), 0.0)
        mean_other = sums / counts[None, :]
        mean_other[rows, own] = np.inf
        b = mean_other.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where((own_count > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        total += s.sum()
    return float(total / n)


def davies_bouldin(features, assignments) -> float:
    x = as_matrix(features)
    lab = np.asarray(assignments)
    clusters = np.unique(lab)
    if clusters.size < 2:
        raise ClusteringError("Davies-Bouldin needs at least two non-empty clusters")
    cents = np.stack([x[lab == c].mean(axis=0) for c in clusters])
    scatter = np.array([np.sqrt(((x[lab == c] - cents[i]) ** 2).sum(1)).mean() for i, c in enumerate(clusters)])
    sep = cdist(cents, cents)
    off = ~np.eye(clusters.size, dtype=bool)
    if np.any(sep[off] == 0):
        raise ClusteringError("coincident centroids make the Davies-Bouldin ratio undefined")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


# -- cluster reliability -----------------------------------------------------------


@dataclass(frozen=True)
class LocalReliability:
    f1: float
    acc: float
    support: int


@dataclass(frozen=True)
class ClusterReliability:
    cluster_id: int
    phi: Mapping[str, LocalReliability]
    ranking: tuple[str, ...]
    usable: bool
    text: str = ""

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "phi": {k: [v.f1, v.acc, v.support] for k, v in sorted(self.phi.items())},
            "ranking": list(self.ranking),
            "usable": self.usable,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterReliability":
        return cls(
            cluster_id=int(d["cluster_id"]),
            phi={k: LocalReliability(float(f), float(a), int(s)) for k, (f, a, s) in d["phi"].items()},
            ranking=tuple(d["ranking"]),
            usable=bool(d["usable"]),
            text=d.get("text", ""),
        )


def rank_experts(phi: Mapping[str, LocalReliability]) -> tuple[str, ...]:
    # F1 desc, then ACC desc, then expert id
    return tuple(sorted(phi, key=lambda e: (-phi[e].f1, -phi[e].acc, e)))


def render_ranking_text(modality: str, rel: ClusterReliability) -> str:
    if not rel.usable:
        return f"{modality} cluster {rel.cluster_id}: no validation support; ranking unusable"
    support = max((p.support for p in rel.phi.values()), default=0)
    parts = [
        f"{pos}. {e} (F1={rel.phi[e].f1:.3f}, ACC={rel.phi[e].acc:.3f})" for pos, e in enumerate(rel.ranking, 1)
    ]
    return f"{modality} cluster {rel.cluster_id} (support={support}): " + "; ".join(parts)


def _make_reliability(modality: str, cluster_id: int, phi: dict[str, LocalReliability]) -> ClusterReliability:
    usable = bool(phi) and all(p.support > 0 for p in phi.values())
    if not usable:
        phi = {}
    rel = ClusterReliability(cluster_id, phi, rank_experts(phi) if usable else (), usable)
    return ClusterReliability(rel.cluster_id, rel.phi, rel.ranking, rel.usable, render_ranking_text(modality, rel))


@dataclass
class ValBundle:
    """Validation data for reliability profiling: features, labels, calibrated scores."""

    features: np.ndarray
    ground_truth: np.ndarray
    scores: Mapping[str, np.ndarray]
    ids: Sequence[str] = field(default_factory=list)

    def without(self, expert_id: str) -> "ValBundle":
        return ValBundle(self.features, self.ground_truth, {k: v for k, v in self.scores.items() if k != expert_id}, self.ids)


def cluster_reliability(
    model: ClusterModel,
    val_samples,
    threshold: float = DEFAULT_THRESHOLD,
    expert_ids: Sequence[str] | None = None,
) -> list[ClusterReliability]:
    """F1/ACC of every expert restricted to each cluster of ``model``.

    ``val_samples`` is either a ValBundle or a list of
    ``(FeatureVector, ground_truth, {expert_id: calibrated_score})`` triples.
    """
    if isinstance(val_samples, ValBundle):
        x, gt, scores = val_samples.features, np.asarray(val_samples.ground_truth), val_samples.scores
    else:
        triples = list(val_samples)
        x = as_matrix([t[0] for t in triples]) if triples else np.zeros((0, model.dim))
        gt = np.array([int(t[1]) for t in triples])
        ids = expert_ids or (sorted(triples[0][2]) if triples else [])
        scores = {e: np.array([t[2][e] for t in triples], dtype=float) for e in ids}
    experts = list(expert_ids) if expert_ids is not None else sorted(scores)
    assigned = model.predict(x) if len(gt) else np.zeros(0, dtype=int)
    out = []
    for c in range(model.k):
        mask = assigned == c
        phi = {}
        if mask.any():
            for e in experts:
                m = f1_acc(zip(scores[e][mask], gt[mask]), threshold)
                phi[e] = LocalReliability(m.f1, m.acc, int(mask.sum()))
        out.append(_make_reliability(model.modality, c, phi))
    return out


# -- profiles ----------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterQuality:
    silhouette: float
    davies_bouldin: float
    text: str

    def to_dict(self) -> dict:
        return {"silhouette": self.silhouette, "davies_bouldin": self.davies_bouldin, "text": self.text}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterQuality":
        return cls(float(d["silhouette"]), float(d["davies_bouldin"]), d["text"])


def render_quality_text(modality: str, silhouette: float, db: float, low: float = LOW_SEPARABILITY) -> str:
    if silhouette < low:
        sep = "low separability"
    elif silhouette < 0.5:
        sep = "moderate separability"
    else:
        sep = "good separability"
    return f"{modality}: silhouette={silhouette:.4f}; davies_bouldin={db:.4f}; {sep}"


@dataclass(frozen=True)
class ClusteringProfile:
    modality: str
    model: ClusterModel
    reliabilities: tuple[ClusterReliability, ...]
    quality: ClusterQuality
    inertia_curve: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "reliabilities", tuple(self.reliabilities))
        ids = [r.cluster_id for r in self.reliabilities]
        if ids != list(range(self.model.k)):
            raise ClusteringError("need exactly one reliability entry per cluster id")

    def lookup(self, x) -> tuple[int, ClusterReliability]:
        c = assign_cluster(self.model, x)
        return c, self.reliabilities[c]

    @property
    def expert_ids(self) -> tuple[str, ...]:
        ids = set()
        for r in self.reliabilities:
            ids.update(r.phi)
        return tuple(sorted(ids))

    def without_expert(self, expert_id: str) -> "ClusteringProfile":
        rels = []
        for r in self.reliabilities:
            phi = {k: v for k, v in r.phi.items() if k != expert_id}
            rels.append(_make_reliability(self.modality, r.cluster_id, phi) if r.usable else r)
        return ClusteringProfile(self.modality, self.model, tuple(rels), self.quality, self.inertia_curve)

    def restricted_to(self, expert_ids: Sequence[str]) -> "ClusteringProfile":
        keep = set(expert_ids)
        profile = self
        for e in self.expert_ids:
            if e not in keep:
                profile = profile.without_expert(e)
        return profile

    def with_reliabilities(self, bundle: ValBundle, threshold: float = DEFAULT_THRESHOLD) -> "ClusteringProfile":
        rels = cluster_reliability(self.model, bundle, threshold)
        return ClusteringProfile(self.modality, self.model, tuple(rels), self.quality, self.inertia_curve)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "model": self.model.to_dict(),
            "reliabilities": [r.to_dict() for r in self.reliabilities],
            "quality": self.quality.to_dict(),
            "inertia_curve": [[k, i] for k, i in self.inertia_curve],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusteringProfile":
        return cls(
            modality=d["modality"],
            model=ClusterModel.from_dict(d["model"]),
            reliabilities=tuple(ClusterReliability.from_dict(r) for r in d["reliabilities"]),
            quality=ClusterQuality.from_dict(d["quality"]),
            inertia_curve=tuple((int(k), float(i)) for k, i in d.get("inertia_curve", ())),
        )


def build_clustering_profile(
    modality: str,
    train_features,
    val_bundle: ValBundle,
    k: int | str | None = None,
    seed: int = 42,
    threshold: float = DEFAULT_THRESHOLD,
    low_separability: float = LOW_SEPARABILITY,
    train_ids: Sequence[str] | None = None,
) -> ClusteringProfile:
    """Fit the modality's clusters on train features and profile experts on val.

    ``k`` may be an integer, ``"auto"`` (peak second difference over
    K in [2, 20]) or None for the registry default.
    """
    if modality not in MODALITIES:
        raise ClusteringError(f"unknown modality {modality!r}")
    if train_ids is not None and val_bundle.ids:
        overlap = set(train_ids) & set(val_bundle.ids)
        if overlap:
            raise ClusteringError(f"train and val share {len(overlap)} sample ids")
    x = as_matrix(train_features)
    curve: list[tuple[int, float]] = []
    if k == "auto":
        lo, hi = AUTO_K_RANGE
        n_distinct = np.unique(x, axis=0).shape[0]
        ks = list(range(lo - 1, min(hi + 1, n_distinct) + 1))
        curve = inertia_curve(x, ks, seed, modality=modality)
        k_sel = select_k(curve)
    else:
        k_sel = DEFAULT_K[modality] if k is None else int(k)
    model = kmeans_fit(x, k_sel, seed, modality=modality)
    xs = model.standardize(x)
    if len(np.unique(model.labels)) >= 2:
        sil = silhouette_score(xs, model.labels)
        db = davies_bouldin(xs, model.labels)
    else:
        sil, db = 0.0, 0.0
    quality = ClusterQuality(sil, db, render_quality_text(modality, sil, db, low_separability))
    rels = cluster_reliability(model, val_bundle, threshold)
    return ClusteringProfile(modality, model, tuple(rels), quality, tuple(curve))
