"""Task metrics: MSE, anomaly AUPRC, kernel MMD, and the anomaly score itself."""
import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .inference import sample_posterior
from .model import joint_log_prob

# Pooled sets larger than this use a canonical subsample for the median heuristic.
MEDIAN_POOL_LIMIT = 3000


@dataclass
class ScoredSet:
    """Decision scores (higher = more normal) and labels (1 = anomaly)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ContractError("scores and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractError("labels must be 0 (normal) or 1 (anomaly)")


def mse(a, b, m=None):
    """Mean squared difference over the coordinates where ``m`` is 1 (all if None)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if m is None:
        if sq.size == 0:
            raise ContractError("mse over an empty set")
        return float(sq.mean())
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), a.shape)
    count = m.sum()
    if count == 0:
        raise ContractError("mse inclusion mask is empty")
    return float((sq * m).sum() / count)


def auprc(s):
    """Step-function average precision with anomalies as the positive class.

    Items are ranked by ascending score (most anomalous first), ties kept in
    input order, and AP = sum_i (R_i - R_{i-1}) P_i over the sweep.
    """
    if not isinstance(s, ScoredSet):
        s = ScoredSet(*s)
    n_pos = int(s.labels.sum())
    if n_pos == 0 or n_pos == s.labels.size:
        raise ContractError("AUPRC needs at least one anomaly and one normal example")
    order = np.argsort(s.scores, kind="stable")
    hits = s.labels[order].astype(np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(np.sum(precision * hits) / n_pos)


def median_bandwidth(X, Y):
    """Median pairwise distance of the pooled sample (canonical subsample if large)."""
    P = np.concatenate([X, Y], axis=0)
    if P.shape[0] > MEDIAN_POOL_LIMIT:
        P = P[np.lexsort(P.T[::-1])]
        idx = np.linspace(0, P.shape[0] - 1, MEDIAN_POOL_LIMIT).round().astype(np.int64)
        P = P[idx]
    d2 = kernels.condensed_sqdist(np.ascontiguousarray(P))
    med = float(np.median(d2))
    return np.sqrt(med) if med > 0 else 1.0


def mmd(X, Y, bandwidth=None):
    """Unbiased Gaussian-kernel MMD^2, clipped at zero.

    The kernel is exp(-|x - y|^2 / (2 bw^2)) with bw the pooled median
    distance unless given.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ContractError(f"mmd needs two (n, d) sets of equal d, got {X.shape} and {Y.shape}")
    m, n = X.shape[0], Y.shape[0]
    if m < 2 or n < 2:
        raise ContractError("mmd needs at least two samples per set")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    gamma = 0.5 / (bw * bw)
    sxx, syy, sxy = kernels.kernel_sums(X, Y, gamma)
    val = sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (m * n)
    return max(float(val), 0.0)


def mmd_permutation_null(X, Y, n_perm=200, seed=0, bandwidth=None):
    """MMD^2 values under random relabelling of the pooled sample."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    P = np.concatenate([X, Y])
    bw = median_bandwidth(X, Y) if bandwidth is None else bandwidth
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for i in range(n_perm):
        perm = rng.permutation(P.shape[0])
        out[i] = mmd(P[perm[:len(X)]], P[perm[len(X):]], bandwidth=bw)
    return out


def anomaly_scores(prior, gen, x_test, cfg, batch_size=500):
    """log p(z) + log p(x|z) at z inferred by Langevin; higher means more normal."""
    x_test = np.asarray(x_test, dtype=np.float64)
    out = np.empty(x_test.shape[0])
    for i in range(0, x_test.shape[0], batch_size):
        xb = x_test[i:i + batch_size]
        z, _ = sample_posterior(prior, gen, xb, cfg, keys=np.arange(i, i + xb.shape[0]))
        out[i:i + xb.shape[0]] = joint_log_prob(prior, gen, xb, z)
    return out


def write_metrics_csv(path, rows):
    """rows: iterable of (metric, value, seed, config_hash)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "seed", "config_hash"])
        for metric, value, seed, h in rows:
            w.writerow([metric, repr(float(value)), seed, h])
