"""Global explanations by prototypes in the model's embedding space.

Prototypes start from k-means (k-means++ seeding, Lloyd iterations) and are
refined by moving each one to the centroid of the samples whose RBF
similarity to it exceeds ``theta``. New inputs are explained by ranking
prototypes by similarity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import numerics as nx
from .errors import ContractError
from .model import HainConfig, HainParams
from .numerics import Rng
from .training import chunked_forward

log = logging.getLogger(__name__)


@dataclass
class PrototypeSet:
    prototypes: np.ndarray   # (P, d')
    sigma: float
    theta: float
    labels: list[int | None] | None = None
    sizes: list[int] | None = None

    def __post_init__(self):
        self.prototypes = np.atleast_2d(nx.as_array(self.prototypes))
        if self.prototypes.shape[0] < 1:
            raise ContractError("need at least one prototype")
        if not self.sigma > 0:
            raise ContractError("sigma must be positive")
        if not 0 < self.theta < 1:
            raise ContractError("theta must lie in (0, 1)")
        if not np.all(np.isfinite(self.prototypes)):
            raise ContractError("prototypes must be finite")

    def to_dict(self) -> dict:
        return {
            "prototypes": [[float(v).hex() for v in row] for row in self.prototypes],
            "sigma": float(self.sigma).hex(),
            "theta": float(self.theta).hex(),
            "labels": self.labels,
            "sizes": self.sizes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeSet":
        protos = np.array([[float.fromhex(v) for v in row] for row in d["prototypes"]])
        return cls(protos, float.fromhex(d["sigma"]), float.fromhex(d["theta"]),
                   d.get("labels"), d.get("sizes"))


@dataclass
class SimilarityReport:
    input_id: str | int | None
    ranking: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"input_id": self.input_id,
                "ranking": [{"prototype": int(j), "similarity": float(s)} for j, s in self.ranking]}


def similarity(x, p, sigma: float) -> np.ndarray | float:
    """``exp(-||x - p||^2 / sigma^2)``; broadcasts over leading axes."""
    if not sigma > 0:
        raise ContractError("sigma must be positive")
    diff = nx.as_array(x) - nx.as_array(p)
    out = np.exp(-np.sum(diff * diff, axis=-1) / sigma ** 2)
    return float(out) if np.ndim(out) == 0 else out


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return cdist(X, C, "sqeuclidean")


def kmeans_plus_plus(X: np.ndarray, P: int, rng: Rng) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, P):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centroid; pick an unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[rng.integers(unused.size)])
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[nxt:nxt + 1])[:, 0])
    return X[chosen].copy()


def kmeans(X, P: int, rng: Rng, max_iter: int = 100, tol: float = 1e-8):
    """Lloyd's algorithm from k-means++ seeds.

    Returns ``(centroids, assignment, distortion_history)``; the history
    holds the mean squared distance after each assignment step.
    """
    X = np.atleast_2d(nx.as_array(X))
    n = X.shape[0]
    if not 1 <= P <= n:
        raise ContractError(f"need 1 <= P <= n (P={P}, n={n})")
    C = kmeans_plus_plus(X, P, rng)
    history = []
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = _sq_dists(X, C)
        assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), assign].mean()))
        new = C.copy()
        for j in range(P):
            members = X[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - C, axis=1)))
        C = new
        if shift < tol:
            break
    d2 = _sq_dists(X, C)
    assign = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(n), assign].mean()))
    return C, assign, history


def kmeans_init(embedded, P: int, rng: Rng, max_iter: int = 100, n_init: int = 10) -> np.ndarray:
    """Best of ``n_init`` k-means runs by final distortion."""
    if n_init < 1:
        raise ContractError("n_init must be >= 1")
    best, best_cost = None, np.inf
    for r in range(n_init):
        C, _, hist = kmeans(embedded, P, rng.stream("restart", r), max_iter)
        if hist[-1] < best_cost:
            best, best_cost = C, hist[-1]
    return best


def median_bandwidth(embedded, rng: Rng, max_samples: int = 1000) -> float:
    """Median pairwise distance of a subsample (1.0 if it is degenerate)."""
    X = np.atleast_2d(nx.as_array(embedded))
    if X.shape[0] > max_samples:
        X = X[np.sort(rng.choice(X.shape[0], max_samples, replace=False))]
    if X.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def neighborhoods(embedded: np.ndarray, protos: np.ndarray, sigma: float, theta: float) -> np.ndarray:
    """Boolean (n, P) matrix: sample i lies in N_j iff sim(x_i, p_j) > theta."""
    return np.exp(-_sq_dists(embedded, protos) / sigma ** 2) > theta


def refine_prototypes(embedded, protos, theta: float, sigma: float, epochs: int,
                      labels=None) -> PrototypeSet:
    """Move each prototype to the centroid of its similarity neighborhood.

    Prototypes with an empty neighborhood stay where they are.
    """
    X = np.atleast_2d(nx.as_array(embedded))
    ps = PrototypeSet(np.array(protos, dtype=np.float64, copy=True), sigma, theta)
    C = ps.prototypes
    for _ in range(epochs):
        member = neighborhoods(X, C, sigma, theta)
        new = C.copy()
        for j in range(C.shape[0]):
            if member[:, j].any():
                new[j] = X[member[:, j]].mean(axis=0)
        C = new
    ps.prototypes = C
    member = neighborhoods(X, C, sigma, theta)
    ps.sizes = member.sum(axis=0).astype(int).tolist()
    if labels is not None:
        y = np.asarray(labels, dtype=int)
        ps.labels = [int(np.bincount(y[member[:, j]]).argmax()) if member[:, j].any() else None
                     for j in range(C.shape[0])]
    return ps


def embed_rows(cfg: HainConfig, params: HainParams, X, chunk: int = 256) -> np.ndarray:
    """The model's embedding of each row (the ``embedded`` forward output)."""
    return chunked_forward(cfg, params, np.atleast_2d(X), chunk).embedded


def build_prototypes(cfg: HainConfig, params: HainParams, X, P: int, rng: Rng,
                     y=None, theta: float = 0.5, sigma: float | None = None,
                     epochs: int = 10, max_iter: int = 100, n_init: int = 10) -> PrototypeSet:
    """k-means initialisation followed by neighborhood refinement."""
    Z = embed_rows(cfg, params, X)
    if P > Z.shape[0]:
        raise ContractError(f"P={P} exceeds the number of samples {Z.shape[0]}")
    if sigma is None:
        sigma = median_bandwidth(Z, rng.stream("bandwidth"))
    init = kmeans_init(Z, P, rng.stream("kmeans"), max_iter, n_init)
    if not neighborhoods(Z, init, sigma, theta).any():
        log.warning("all prototype neighborhoods are empty at theta=%g; "
                    "prototypes stay at their k-means positions", theta)
    return refine_prototypes(Z, init, theta, sigma, epochs, labels=y)


def explain_by_prototype(cfg: HainConfig, params: HainParams, protos: PrototypeSet, x,
                         input_id=None) -> SimilarityReport:
    z = embed_rows(cfg, params, x)[0]
    sims = similarity(z, protos.prototypes, protos.sigma)
    order = np.argsort(-sims, kind="stable")
    return SimilarityReport(input_id, [(int(j), float(sims[j])) for j in order])
