"""Independent oracles shared by the unit and acceptance tests.

Everything here recomputes expected values by direct enumeration or
textbook formulas, deliberately avoiding the code paths under test.
"""

from __future__ import annotations

import numpy as np

from crowdrel.data import AnnotationSet
from crowdrel.neural import FnnParams, forward, soft_ce_loss


def make_annotations(triples: list[tuple[int, int, int]], n_instances: int,
                     n_annotators: int, n_labels: int) -> AnnotationSet:
    ii, jj, ll = (np.array(col, dtype=np.int64) for col in zip(*triples))
    return AnnotationSet(
        n_instances=n_instances, n_annotators=n_annotators, n_labels=n_labels,
        instance_idx=ii, annotator_idx=jj, label_idx=ll,
        instance_ids=tuple(f"i{i}" for i in range(n_instances)),
        annotator_ids=tuple(f"a{j}" for j in range(n_annotators)),
    )


def random_annotation_setup(rng: np.random.Generator, max_n: int = 20, max_m: int = 5,
                            max_k: int = 4):
    """Random priors + sparse annotations (every instance covered)."""
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    k = int(rng.integers(2, max_k + 1))
    keep = rng.random((n, m)) < 0.7
    keep[np.arange(n), rng.integers(0, m, size=n)] = True
    ii, jj = np.nonzero(keep)
    triples = [(int(i), int(j), int(rng.integers(0, k))) for i, j in zip(ii, jj)]
    ann = make_annotations(triples, n, m, k)
    label_prior = rng.dirichlet(np.ones(k), size=n)
    rel_prior = rng.uniform(0.01, 0.99, size=ann.n_pairs)
    return label_prior, rel_prior, ann


def brute_force_posteriors(label_prior: np.ndarray, rel_prior: np.ndarray,
                           ann: AnnotationSet) -> tuple[np.ndarray, np.ndarray]:
    """Enumerate the joint p(t, r_1..r_m, a) per instance and marginalize.

    Returns (tables (P, K, 2), label_posterior (N, K)).
    """
    n, k = label_prior.shape
    tables = np.zeros((ann.n_pairs, k, 2))
    label_post = np.zeros((n, k))
    for i in range(n):
        pairs = [p for p in range(ann.n_pairs) if ann.instance_idx[p] == i]
        m = len(pairs)
        weights: dict[tuple[int, int], float] = {}
        for t in range(k):
            for bits in range(2 ** m):
                w = label_prior[i, t]
                for q, p in enumerate(pairs):
                    r = (bits >> q) & 1
                    w *= rel_prior[p] if r else (1.0 - rel_prior[p])
                    if r:
                        w *= 1.0 if ann.label_idx[p] == t else 0.0
                    else:
                        w *= 1.0 / k
                weights[(t, bits)] = w
        total = sum(weights.values())
        for (t, bits), w in weights.items():
            label_post[i, t] += w / total
            for q, p in enumerate(pairs):
                tables[p, t, (bits >> q) & 1] += w / total
    return tables, label_post


def finite_diff_grads(params: FnnParams, x: np.ndarray, targets: np.ndarray,
                      normalizer: float, h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the soft cross entropy, coordinate by coordinate."""
    grads = []
    for arr in params.arrays():
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = grad.ravel()
        for pos in range(flat.size):
            keep = flat[pos]
            flat[pos] = keep + h
            up = soft_ce_loss(forward(params, x)[0], targets, normalizer)
            flat[pos] = keep - h
            down = soft_ce_loss(forward(params, x)[0], targets, normalizer)
            flat[pos] = keep
            gflat[pos] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray],
                       floor: float = 1e-4) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / scale).max()))
    return worst


def fleiss_kappa_oracle(count_table: np.ndarray) -> float:
    """Direct evaluation of the published kappa formula on an N x K count table."""
    counts = np.asarray(count_table, dtype=np.float64)
    n_instances, _ = counts.shape
    n_raters = counts[0].sum()
    p_i = [(row @ row - n_raters) / (n_raters * (n_raters - 1)) for row in counts]
    p_bar = sum(p_i) / n_instances
    p_j = counts.sum(axis=0) / (n_instances * n_raters)
    p_e = float(p_j @ p_j)
    return (p_bar - p_e) / (1.0 - p_e)


def krippendorff_alpha_oracle(units: list[list[int]]) -> float:
    """Pairwise nominal-disagreement formulation (no coincidence matrix)."""
    units = [u for u in units if len(u) > 1]
    n = sum(len(u) for u in units)
    d_obs = 0.0
    for unit in units:
        du = sum(1.0 for a in unit for b in unit if a != b)
        d_obs += du / (len(unit) - 1)
    d_obs /= n
    pooled = [v for unit in units for v in unit]
    d_exp = sum(1.0 for a in pooled for b in pooled if a != b) / (n * (n - 1))
    if d_exp == 0.0:
        return 1.0
    return 1.0 - d_obs / d_exp


def q_objective_oracle(label_prior: np.ndarray, rel_prior: np.ndarray,
                       tables: np.ndarray, ann: AnnotationSet) -> float:
    """Quadruple loop over (pair, t, r) plus the instance-prior term."""
    n, k = label_prior.shape
    label_post = np.zeros((n, k))
    first_pair = {}
    for p in range(ann.n_pairs):
        i = int(ann.instance_idx[p])
        if i not in first_pair:
            first_pair[i] = p
    for i, p in first_pair.items():
        for t in range(k):
            label_post[i, t] = tables[p, t, 0] + tables[p, t, 1]
    total = 0.0
    for i in range(n):
        for t in range(k):
            total += label_post[i, t] * np.log(max(label_prior[i, t], 1e-12))
    for p in range(ann.n_pairs):
        i = int(ann.instance_idx[p])
        a = int(ann.label_idx[p])
        for t in range(k):
            for r in (0, 1):
                pi = tables[p, t, r]
                if pi == 0.0:
                    continue
                prior_r = rel_prior[p] if r else 1.0 - rel_prior[p]
                total += pi * np.log(max(prior_r, 1e-12))
                emission = (1.0 if a == t else 0.0) if r else 1.0 / k
                total += pi * np.log(max(emission, 1e-12))
    return total


def ce_losses_oracle(label_prior: np.ndarray, rel_prior: np.ndarray,
                     tables: np.ndarray, ann: AnnotationSet) -> tuple[float, float]:
    n, k = label_prior.shape
    first_pair = {}
    for p in range(ann.n_pairs):
        i = int(ann.instance_idx[p])
        if i not in first_pair:
            first_pair[i] = p
    loss_t = 0.0
    for i, p in first_pair.items():
        for t in range(k):
            for r in (0, 1):
                loss_t -= tables[p, t, r] * np.log(max(label_prior[i, t], 1e-12))
    loss_r = 0.0
    for p in range(ann.n_pairs):
        for t in range(k):
            for r in (0, 1):
                prior_r = rel_prior[p] if r else 1.0 - rel_prior[p]
                loss_r -= tables[p, t, r] * np.log(max(prior_r, 1e-12))
    return loss_t / n, loss_r / ann.n_pairs
