"""Deterministic k-means and clustering quality metrics.

All metrics are implemented from their contingency-table / pair-count
definitions so degenerate partitions follow documented conventions instead
of library-specific behavior:

- ARI: undefined 0/0 -> 1.0 (two trivial partitions agree perfectly)
- NMI/AMI: both entropies zero -> 1.0; exactly one zero -> 0.0
- FMI/Jaccard: no co-clustered pairs on either side -> 1.0; one side -> 0.0
- silhouette: singleton clusters and zero-diameter comparisons score 0
- CHI: zero between-cluster scatter -> 0.0, zero within -> inf
- DBI: 0/0 similarity terms -> 0
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

logger = logging.getLogger(__name__)

EXTERNAL_METRICS = ("ari", "nmi", "ami", "fmi", "jaccard", "purity")
INTERNAL_METRICS = ("sc", "chi", "dbi")
METRIC_ORDER = ("ari", "nmi", "fmi", "sc", "ami", "jaccard", "chi", "purity", "dbi")

_TINY = 1e-15


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """k-means++ seeding plus Lloyd iterations, fully deterministic.

    Assignment ties break to the lowest centroid index; clusters that
    empty out are reseeded at the point farthest from its current
    centroid (distinct points for multiple empty clusters). Stops when
    assignments stop changing or after max_iter rounds.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= _TINY:
            pick = int(rng.integers(n))  # all remaining mass identical
        else:
            pick = int(rng.choice(n, p=closest / total))
        centroids[j] = x[pick]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        own = d2[np.arange(n), new_assign].copy()
        for c in range(k):
            members = new_assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centroids[c] = x[far]
                new_assign[far] = c
                own[far] = -np.inf
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def contingency(labels_true: np.ndarray, labels_pred: np.ndarray) -> np.ndarray:
    """Counts n_ij of points with true class i and predicted cluster j."""
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape or labels_true.ndim != 1:
        raise ValueError("label vectors must be 1-D and equally long")
    _, ti = np.unique(labels_true, return_inverse=True)
    _, pi = np.unique(labels_pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _comb2(x):
    return x * (x - 1) / 2.0


def _pair_counts(table: np.ndarray) -> tuple[float, float, float, float]:
    n = table.sum()
    together_both = _comb2(table).sum()
    together_true = _comb2(table.sum(axis=1)).sum()
    together_pred = _comb2(table.sum(axis=0)).sum()
    return _comb2(n), together_both, together_true, together_pred


def adjusted_rand_index(labels_true, labels_pred) -> float:
    total, both, t, p = _pair_counts(contingency(labels_true, labels_pred))
    expected = t * p / total if total > 0 else 0.0
    denom = 0.5 * (t + p) - expected
    if abs(denom) <= _TINY:
        return 1.0
    return float((both - expected) / denom)


def _entropies(table: np.ndarray) -> tuple[float, float, float]:
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    nz = table > 0
    mi = float((table[nz] / n * np.log(n * table[nz] / np.outer(a, b)[nz])).sum())
    h_true = float(-(a[a > 0] / n * np.log(a[a > 0] / n)).sum())
    h_pred = float(-(b[b > 0] / n * np.log(b[b > 0] / n)).sum())
    return mi, h_true, h_pred


def normalized_mutual_info(labels_true, labels_pred) -> float:
    """NMI with arithmetic-mean normalization."""
    mi, h_true, h_pred = _entropies(contingency(labels_true, labels_pred))
    if h_true <= _TINY and h_pred <= _TINY:
        return 1.0
    if h_true <= _TINY or h_pred <= _TINY:
        return 0.0
    return float(mi / (0.5 * (h_true + h_pred)))


def expected_mutual_info(table: np.ndarray) -> float:
    """E[MI] under the permutation model with fixed marginals.

    Sums the hypergeometric expectation term by term; gammaln keeps the
    factorials stable. Quadratic in the number of clusters, fine at desk
    scale.
    """
    n = int(table.sum())
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for k in range(lo, hi + 1):
                log_p = (
                    gammaln(ai + 1) + gammaln(bj + 1)
                    + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                    - gammaln(n + 1) - gammaln(k + 1)
                    - gammaln(ai - k + 1) - gammaln(bj - k + 1)
                    - gammaln(n - ai - bj + k + 1)
                )
                emi += (k / n) * np.log(n * k / (ai * bj)) * np.exp(log_p)
    return float(emi)


def adjusted_mutual_info(labels_true, labels_pred) -> float:
    """AMI with arithmetic-mean normalization."""
    table = contingency(labels_true, labels_pred)
    mi, h_true, h_pred = _entropies(table)
    if h_true <= _TINY and h_pred <= _TINY:
        return 1.0
    if h_true <= _TINY or h_pred <= _TINY:
        return 0.0
    emi = expected_mutual_info(table)
    denom = 0.5 * (h_true + h_pred) - emi
    if abs(denom) <= _TINY:
        return 1.0 if abs(mi - emi) <= _TINY else 0.0
    return float((mi - emi) / denom)


def fowlkes_mallows_index(labels_true, labels_pred) -> float:
    _, both, t, p = _pair_counts(contingency(labels_true, labels_pred))
    if t <= _TINY and p <= _TINY:
        return 1.0
    if t <= _TINY or p <= _TINY:
        return 0.0
    return float(both / np.sqrt(t * p))


def jaccard_index(labels_true, labels_pred) -> float:
    """Pair-level Jaccard: |pairs together in both| / |pairs together in either|."""
    _, both, t, p = _pair_counts(contingency(labels_true, labels_pred))
    union = t + p - both
    if union <= _TINY:
        return 1.0
    return float(both / union)


def purity(labels_true, labels_pred) -> float:
    """Fraction of points in their predicted cluster's majority class."""
    table = contingency(labels_true, labels_pred)
    return float(table.max(axis=0).sum() / table.sum())


def silhouette_coefficient(points: np.ndarray, labels_pred) -> float:
    """Mean silhouette over all points (singletons and 0/0 score 0)."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels_pred)
    if x.shape[0] != labels.shape[0]:
        raise ValueError("points and labels must agree on n")
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        return 0.0
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    n = x.shape[0]
    sizes = np.bincount(inv)
    scores = np.zeros(n)
    for i in range(n):
        c = inv[i]
        if sizes[c] == 1:
            continue
        a = dist[i, inv == c].sum() / (sizes[c] - 1)
        b = np.inf
        for other in range(len(uniq)):
            if other != c:
                b = min(b, dist[i, inv == other].mean())
        top = max(a, b)
        scores[i] = 0.0 if top <= _TINY else (b - a) / top
    return float(scores.mean())


def calinski_harabasz_index(points: np.ndarray, labels_pred) -> float:
    """Between/within variance ratio; 0 when clusters share one centroid,
    inf when clusters are internally zero-variance but separated."""
    x = np.asarray(points, dtype=np.float64)
    _, inv = np.unique(labels_pred, return_inverse=True)
    n = x.shape[0]
    k = inv.max() + 1
    mean = x.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in range(k):
        members = x[inv == c]
        mu = members.mean(axis=0)
        between += len(members) * ((mu - mean) ** 2).sum()
        within += ((members - mu) ** 2).sum()
    if between <= _TINY:
        return 0.0
    if within <= _TINY:
        return float("inf")
    return float((between / (k - 1)) / (within / (n - k)))


def davies_bouldin_index(points: np.ndarray, labels_pred) -> float:
    """Mean worst-case cluster similarity (lower is better); 0/0 terms -> 0."""
    x = np.asarray(points, dtype=np.float64)
    _, inv = np.unique(labels_pred, return_inverse=True)
    k = inv.max() + 1
    if k < 2:
        return 0.0
    mus = np.stack([x[inv == c].mean(axis=0) for c in range(k)])
    scatter = np.array([
        np.sqrt(((x[inv == c] - mus[c]) ** 2).sum(axis=1)).mean() for c in range(k)
    ])
    worst = np.zeros(k)
    for c in range(k):
        for d in range(k):
            if c == d:
                continue
            gap = np.sqrt(((mus[c] - mus[d]) ** 2).sum())
            mass = scatter[c] + scatter[d]
            if gap <= _TINY:
                r = 0.0 if mass <= _TINY else float("inf")
            else:
                r = mass / gap
            worst[c] = max(worst[c], r)
    return float(worst.mean())


def external_metrics(labels_true, labels_pred) -> dict[str, float]:
    return {
        "ari": adjusted_rand_index(labels_true, labels_pred),
        "nmi": normalized_mutual_info(labels_true, labels_pred),
        "ami": adjusted_mutual_info(labels_true, labels_pred),
        "fmi": fowlkes_mallows_index(labels_true, labels_pred),
        "jaccard": jaccard_index(labels_true, labels_pred),
        "purity": purity(labels_true, labels_pred),
    }


def internal_metrics(points, labels_pred) -> dict[str, float]:
    return {
        "sc": silhouette_coefficient(points, labels_pred),
        "chi": calinski_harabasz_index(points, labels_pred),
        "dbi": davies_bouldin_index(points, labels_pred),
    }


def count_seed(base_seed: int, k: int) -> int:
    """Stable per-cluster-count seed derived from the run seed."""
    return int(np.random.SeedSequence([base_seed, k]).generate_state(1)[0])


@dataclass
class EvalReport:
    """Metric rows per cluster count plus mean/std aggregates (ddof=0)."""

    counts: list[int]
    rows: list[dict]
    mean: dict[str, float]
    std: dict[str, float]

    def to_csv_rows(self) -> tuple[list[str], list[list[str]]]:
        header = ["count"] + list(METRIC_ORDER) + ["dbi_x100"]
        body = []
        for row in self.rows:
            body.append([str(row["count"])]
                        + [repr(float(row[m])) for m in METRIC_ORDER]
                        + [repr(100.0 * float(row["dbi"]))])
        for tag, agg in (("mean", self.mean), ("std", self.std)):
            body.append([tag] + [repr(float(agg[m])) for m in METRIC_ORDER]
                        + [repr(100.0 * float(agg["dbi"]))])
        return header, body

    def format_text(self) -> str:
        lines = ["cluster quality (DBI also shown x100):"]
        header = f"{'count':>6} " + " ".join(f"{m:>9}" for m in METRIC_ORDER)
        lines.append(header)
        for row in self.rows:
            lines.append(f"{row['count']:>6} "
                         + " ".join(f"{row[m]:>9.4f}" for m in METRIC_ORDER))
        lines.append(f"{'mean':>6} " + " ".join(f"{self.mean[m]:>9.4f}" for m in METRIC_ORDER))
        lines.append(f"{'std':>6} " + " ".join(f"{self.std[m]:>9.4f}" for m in METRIC_ORDER))
        return "\n".join(lines) + "\n"


def evaluate(
    z: np.ndarray,
    labels_true,
    counts,
    seed: int = 0,
) -> EvalReport:
    """Cluster the embedding at each count and score all nine metrics.

    Each count gets its own derived seed so adding counts never perturbs
    the others. Aggregates are mean and population std over counts.
    """
    counts = sorted(int(c) for c in counts)
    if not counts:
        raise ValueError("at least one cluster count is required")
    labels_true = np.asarray(labels_true)
    rows = []
    for k in counts:
        pred = kmeans(z, k, seed=count_seed(seed, k))
        row = {"count": k}
        row.update(external_metrics(labels_true, pred))
        row.update(internal_metrics(z, pred))
        rows.append(row)
        logger.info("k=%d: ari=%.4f nmi=%.4f", k, row["ari"], row["nmi"])
    mean = {m: float(np.mean([r[m] for r in rows])) for m in METRIC_ORDER}
    std = {m: float(np.std([r[m] for r in rows])) for m in METRIC_ORDER}
    return EvalReport(counts=counts, rows=rows, mean=mean, std=std)
