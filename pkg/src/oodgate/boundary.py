"""Per-family spherical Gaussian boundaries and the multi-centroid z-score gate.

Each family k gets a centroid mu_k, an isotropic scale sigma_k, and the mean
and standard deviation (m_k, s_k) of its training samples' Euclidean
distances to mu_k. A test embedding is in-distribution when its standardized
distance z_k = (d_k - m_k) / s_k lies inside the band for at least one
family; otherwise it is flagged out-of-distribution.

Also houses a normalized-Laplacian spectral diagnostic over a mutual-kNN
graph of the embeddings. The diagnostic is advisory and never sits on the
prediction path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from oodgate.errors import DegenerateDataError, UserError
from oodgate.nncore import softmax


@dataclass
class ClassBoundary:
    class_id: int
    centroid: np.ndarray
    sigma_iso: float
    dist_mean: float
    dist_std: float
    n_samples: int

    def __post_init__(self):
        if self.sigma_iso <= 0 or self.dist_std <= 0:
            raise DegenerateDataError(
                f"class {self.class_id}: degenerate scale (sigma={self.sigma_iso}, "
                f"s={self.dist_std})")
        if self.n_samples < 2:
            raise UserError(f"class {self.class_id}: need >= 2 samples")
        if not np.all(np.isfinite(self.centroid)):
            raise UserError(f"class {self.class_id}: non-finite centroid")


@dataclass
class BoundarySet:
    boundaries: list[ClassBoundary]
    embedding_dim: int
    band: float = 1.0

    def __post_init__(self):
        ids = [b.class_id for b in self.boundaries]
        if ids != list(range(len(ids))):
            raise UserError(f"boundary class ids must be 0..K-1, got {ids}")
        for b in self.boundaries:
            if b.centroid.shape != (self.embedding_dim,):
                raise UserError(f"class {b.class_id}: centroid dim mismatch")

    @property
    def n_classes(self) -> int:
        return len(self.boundaries)


@dataclass
class OodVerdict:
    z_scores: np.ndarray
    min_abs_z: float
    decision: str  # in_distribution | out_of_distribution
    nearest_class: int
    confidence: float
    suspicion: str = "normal"  # normal | possible_outlier | highly_suspicious


def fit_boundaries(embeddings: np.ndarray, labels: np.ndarray,
                   sigma_mode: str = "per_class") -> BoundarySet:
    """Fit one spherical boundary per family from labeled training embeddings.

    sigma_mode "shared" pools the per-coordinate deviations across classes
    into one sigma; distance statistics m_k, s_k stay per-class either way.
    s_k uses the population (biased) standard deviation.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if sigma_mode not in ("per_class", "shared"):
        raise UserError(f"unknown sigma_mode {sigma_mode!r}")
    K = labels.max() + 1
    boundaries = []
    sq_dev_sums, n_total = 0.0, 0
    stats = []
    for k in range(K):
        Ek = E[labels == k]
        if len(Ek) < 2:
            raise UserError(f"family {k} has {len(Ek)} samples; need >= 2")
        mu = Ek.mean(axis=0)
        sq_dev = ((Ek - mu) ** 2).sum()
        sq_dev_sums += sq_dev
        n_total += Ek.size
        dists = np.linalg.norm(Ek - mu, axis=1)
        m, s = float(dists.mean()), float(dists.std())
        if s == 0.0:
            raise DegenerateDataError(
                f"family {k}: all training distances identical (s=0)")
        stats.append((mu, np.sqrt(sq_dev / Ek.size), m, s, len(Ek)))
    shared_sigma = float(np.sqrt(sq_dev_sums / n_total))
    for k, (mu, sigma, m, s, n) in enumerate(stats):
        boundaries.append(ClassBoundary(
            class_id=k, centroid=mu,
            sigma_iso=shared_sigma if sigma_mode == "shared" else float(sigma),
            dist_mean=m, dist_std=s, n_samples=n))
    return BoundarySet(boundaries=boundaries, embedding_dim=E.shape[1])


def log_gaussian_density(x: np.ndarray, boundary: ClassBoundary) -> float:
    """Log of the isotropic Gaussian density N(x | mu_k, sigma_k^2 I)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != boundary.centroid.shape:
        raise UserError(f"dimension mismatch: {x.shape} vs {boundary.centroid.shape}")
    d = x.size
    s2 = boundary.sigma_iso ** 2
    sq = float(((x - boundary.centroid) ** 2).sum())
    return -0.5 * d * np.log(2 * np.pi * s2) - sq / (2 * s2)


def gaussian_density(x: np.ndarray, boundary: ClassBoundary) -> float:
    return float(np.exp(log_gaussian_density(x, boundary)))


def z_score(value: float, mean: float, std: float) -> float:
    if std <= 0:
        raise UserError(f"z-score needs std > 0, got {std}")
    return (value - mean) / std


def coefficient_of_variation(mean: float, std: float) -> float:
    """std/mean; scale-free dispersion diagnostic (not on the decision path)."""
    if mean == 0:
        raise UserError("coefficient of variation undefined for zero mean")
    return std / mean


def classify_sample(embedding: np.ndarray, boundaries: BoundarySet,
                    band: float = 1.0, one_sided: bool = False) -> OodVerdict:
    """Multi-centroid z-score gate.

    In-distribution iff some family's |z_k| <= band (or z_k <= band when
    one_sided, which accepts samples unusually close to a centroid).
    nearest_class is argmin |z_k| with lowest-index tie-break; confidence is
    the softmax over -|z_k| at the nearest class.
    """
    if boundaries.n_classes == 0:
        raise UserError("empty boundary set")
    if band <= 0:
        raise UserError(f"band must be positive, got {band}")
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (boundaries.embedding_dim,):
        raise UserError(f"embedding dim {e.shape} != {boundaries.embedding_dim}")
    z = np.array([(float(np.linalg.norm(e - b.centroid)) - b.dist_mean) / b.dist_std
                  for b in boundaries.boundaries])
    abs_z = np.abs(z)
    inside = (z <= band) if one_sided else (abs_z <= band)
    nearest = int(abs_z.argmin())
    min_abs = float(abs_z[nearest])
    conf = float(softmax(-abs_z)[nearest])
    suspicion = ("highly_suspicious" if min_abs > 2.0
                 else "possible_outlier" if min_abs > 1.0 else "normal")
    return OodVerdict(
        z_scores=z, min_abs_z=min_abs,
        decision="in_distribution" if bool(inside.any()) else "out_of_distribution",
        nearest_class=nearest, confidence=conf, suspicion=suspicion)


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """Unit diagonal where degree is nonzero, -1/sqrt(d_u d_v) on edges."""
    A = np.asarray(adjacency)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise UserError("adjacency must be square")
    A = (A != 0).astype(np.float64)
    if np.any(np.diag(A) != 0):
        raise UserError("adjacency must have zero diagonal")
    if not np.array_equal(A, A.T):
        raise UserError("adjacency must be symmetric")
    deg = A.sum(axis=1)
    L = np.zeros_like(A)
    nz = deg > 0
    L[np.diag_indices_from(L)] = nz.astype(np.float64)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(nz, 1.0 / np.sqrt(np.where(nz, deg, 1.0)), 0.0)
    L -= A * np.outer(inv_sqrt, inv_sqrt)
    return L


@dataclass
class SpectralReport:
    n_nodes: int
    n_edges: int
    eigenvalues: np.ndarray
    approx_cluster_count: int  # eigenvalues below 0.1
    per_family_conductance: dict[int, float] = field(default_factory=dict)


def mutual_knn_adjacency(embeddings: np.ndarray, k_neighbors: int) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    n = len(E)
    if k_neighbors >= n:
        raise UserError(f"k_neighbors={k_neighbors} must be < n={n}")
    if k_neighbors < 1:
        raise UserError("k_neighbors must be >= 1")
    d2 = ((E[:, None, :] - E[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]
    directed = np.zeros((n, n), dtype=bool)
    directed[np.arange(n)[:, None], nn] = True
    return directed & directed.T


def spectral_diagnostics(embeddings: np.ndarray, labels: np.ndarray,
                         k_neighbors: int) -> SpectralReport:
    """Advisory cluster-structure report from the mutual-kNN graph spectrum."""
    A = mutual_knn_adjacency(embeddings, k_neighbors)
    return spectral_diagnostics_from_adjacency(A, labels)


def spectral_diagnostics_from_adjacency(A: np.ndarray,
                                        labels: np.ndarray) -> SpectralReport:
    n_edges = int(A.sum()) // 2
    if n_edges == 0:
        raise UserError("mutual-kNN pruning left an empty edge set")
    L = normalized_laplacian(A)
    eig = np.linalg.eigvalsh(L)
    labels = np.asarray(labels, dtype=int)
    deg = A.sum(axis=1).astype(np.float64)
    total_vol = deg.sum()
    conductance: dict[int, float] = {}
    for fam in sorted(set(labels.tolist())):
        mask = labels == fam
        vol = deg[mask].sum()
        cut = float(A[mask][:, ~mask].sum())
        denom = min(vol, total_vol - vol)
        conductance[fam] = cut / denom if denom > 0 else float("inf")
    return SpectralReport(n_nodes=len(A), n_edges=n_edges, eigenvalues=eig,
                          approx_cluster_count=int((eig < 0.1).sum()),
                          per_family_conductance=conductance)


# ---------------------------------------------------------------------------
# Boundary file: "K=<k> dim=<d> band=<b>" header, then one family per line.

def save_boundaries(bset: BoundarySet, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"K={bset.n_classes} dim={bset.embedding_dim} band={bset.band!r}\n")
        for b in bset.boundaries:
            mu = ",".join(repr(float(v)) for v in b.centroid)
            f.write(f"{b.class_id}\t{b.sigma_iso!r}\t{b.dist_mean!r}"
                    f"\t{b.dist_std!r}\t{b.n_samples}\t{mu}\n")


def load_boundaries(path: str) -> BoundarySet:
    with open(path) as f:
        head = f.readline().strip()
        try:
            fields = dict(part.split("=") for part in head.split())
            K, dim, band = int(fields["K"]), int(fields["dim"]), float(fields["band"])
        except (ValueError, KeyError):
            raise UserError(f"{path}: malformed boundary header {head!r}") from None
        boundaries = []
        for line in f:
            if not line.strip():
                continue
            cid, sigma, m, s, n, mu = line.rstrip("\n").split("\t")
            boundaries.append(ClassBoundary(
                class_id=int(cid), sigma_iso=float(sigma), dist_mean=float(m),
                dist_std=float(s), n_samples=int(n),
                centroid=np.array([float(v) for v in mu.split(",")])))
    if len(boundaries) != K:
        raise UserError(f"{path}: expected {K} boundaries, found {len(boundaries)}")
    return BoundarySet(boundaries=boundaries, embedding_dim=dim, band=band)
