"""Fellegi-Sunter probabilistic record linkage.

Builds binary agreement vectors for all within-domain record pairs, fits
the two-class mixture over agreement patterns by EM, scores pairs with
the likelihood ratio / posterior match probability and turns scores into
a one-to-one set of declared links.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .records import MISSING, MatchMatrix, check_block_diagonal

PROB_FLOOR = 1e-6


@dataclass(frozen=True)
class ComparisonVector:
    """Agreement indicators for one candidate pair."""

    j: int
    j_prime: int
    q: tuple


@dataclass(frozen=True)
class ComparisonSet:
    """All within-domain comparisons between two files, stored columnar.

    ``pairs[i] = (row1, row2)`` and ``q[i]`` is the h-vector of 0/1
    agreement indicators; a field agrees only when both values are
    non-missing and equal.
    """

    n1: int
    n2: int
    pairs: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        pairs = np.ascontiguousarray(np.asarray(self.pairs, dtype=np.int64))
        q = np.ascontiguousarray(np.asarray(self.q, dtype=np.uint8))
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("pairs must be a (t, 2) array")
        if q.ndim != 2 or q.shape[0] != pairs.shape[0]:
            raise ValueError("q must align with pairs")
        pairs.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "q", q)

    @property
    def n_fields(self):
        return self.q.shape[1]

    def __len__(self):
        return self.pairs.shape[0]

    def __iter__(self):
        for (j, jp), qrow in zip(self.pairs, self.q):
            yield ComparisonVector(int(j), int(jp), tuple(int(v) for v in qrow))

    def pattern_counts(self):
        """Unique agreement patterns and their multiplicities."""
        codes = self._codes()
        uniq, counts = np.unique(codes, return_counts=True)
        h = self.n_fields
        patterns = (uniq[:, None] >> np.arange(h)[None, :]) & 1
        return patterns.astype(np.uint8), counts

    def _codes(self):
        h = self.n_fields
        weights = (1 << np.arange(h)).astype(np.int64)
        return self.q.astype(np.int64) @ weights


def build_comparisons(f1, f2, key_fields=None):
    """Build agreement vectors for every within-domain record pair.

    Parameters
    ----------
    f1, f2 : RecordFile
        Files to compare; they must share the domain space.
    key_fields : sequence of int, optional
        Column indices of the key fields to compare (default: all).

    Returns
    -------
    ComparisonSet
        One comparison per pair of records sharing a domain.  A field
        agrees (q_l = 1) only when both values are non-missing and equal.
    """
    if f1.n_domains != f2.n_domains:
        raise ValueError("files disagree on the number of domains")
    if key_fields is None:
        key_fields = range(f1.n_key_fields)
    key_fields = list(key_fields)
    for l in key_fields:
        if l >= f1.n_key_fields or l >= f2.n_key_fields:
            raise ValueError(f"key field index {l} not present in both files")
    w1 = f1.key_values[:, key_fields]
    w2 = f2.key_values[:, key_fields]
    pair_blocks = []
    q_blocks = []
    for d in range(1, f1.n_domains + 1):
        i1 = f1.domain_rows(d)
        i2 = f2.domain_rows(d)
        if i1.size == 0 or i2.size == 0:
            continue
        a = w1[i1]
        b = w2[i2]
        agree = (a[:, None, :] == b[None, :, :]) & (a[:, None, :] != MISSING)
        jj, kk = np.meshgrid(i1, i2, indexing="ij")
        pair_blocks.append(np.column_stack([jj.ravel(), kk.ravel()]))
        q_blocks.append(agree.reshape(-1, len(key_fields)).astype(np.uint8))
    if pair_blocks:
        pairs = np.concatenate(pair_blocks)
        q = np.concatenate(q_blocks)
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
        q = np.empty((0, len(key_fields)), dtype=np.uint8)
    return ComparisonSet(n1=f1.n_records, n2=f2.n_records, pairs=pairs, q=q)


@dataclass(frozen=True)
class FsModel:
    """Fitted mixture parameters for the agreement-vector model.

    m[l] and u[l] are the per-field agreement probabilities in the match
    and non-match classes, zeta the marginal match probability of a
    random pair.  All probabilities are clamped to
    [PROB_FLOOR, 1 - PROB_FLOOR].
    """

    m: np.ndarray
    u: np.ndarray
    zeta: float
    loglik_trace: tuple = ()
    n_iter: int = 0
    converged: bool = True
    flags: tuple = ()

    def __post_init__(self):
        m = np.clip(np.asarray(self.m, dtype=float), PROB_FLOOR, 1 - PROB_FLOOR)
        u = np.clip(np.asarray(self.u, dtype=float), PROB_FLOOR, 1 - PROB_FLOOR)
        if m.shape != u.shape or m.ndim != 1:
            raise ValueError("m and u must be 1-d arrays of equal length")
        m.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "u", u)
        object.__setattr__(
            self, "zeta", float(np.clip(self.zeta, PROB_FLOOR, 1 - PROB_FLOOR))
        )


def default_initial_model(n_fields, n1=None, n2=None, n_pairs=None):
    """Deterministic EM start: m = 0.9, u = 0.1, zeta = min(n1, n2) / n_pairs.

    The overlap-based zeta is capped at 0.5 so tiny comparison spaces do
    not start the mixture at a degenerate weight.
    """
    if n1 is not None and n2 is not None and n_pairs:
        zeta = min(0.5, min(n1, n2) / n_pairs)
    else:
        zeta = 0.1
    return FsModel(
        m=np.full(n_fields, 0.9), u=np.full(n_fields, 0.1), zeta=zeta
    )


def _as_pattern_counts(comparisons):
    if isinstance(comparisons, ComparisonSet):
        patterns, counts = comparisons.pattern_counts()
        meta = (comparisons.n1, comparisons.n2, len(comparisons))
        return patterns, counts, meta
    rows = [tuple(c.q) for c in comparisons]
    if not rows:
        raise ValueError("at least one comparison is required")
    arr = np.asarray(rows, dtype=np.uint8)
    uniq, counts = np.unique(arr, axis=0, return_counts=True)
    return uniq, counts, (None, None, arr.shape[0])


def _class_likelihoods(patterns, m, u):
    a = np.prod(np.where(patterns == 1, m, 1 - m), axis=1)
    b = np.prod(np.where(patterns == 1, u, 1 - u), axis=1)
    return a, b


def fit_em(comparisons, init=None, tol=1e-6, max_iter=1000):
    """Fit the two-class agreement mixture by EM.

    Parameters
    ----------
    comparisons : ComparisonSet or iterable of ComparisonVector
        Observed agreement vectors.
    init : FsModel, optional
        Starting point; defaults to m = 0.9, u = 0.1 and an overlap-based
        zeta.
    tol : float
        Convergence threshold on the relative log-likelihood change.
    max_iter : int
        Iteration cap; hitting it flags the fit as unconverged.

    Returns
    -------
    FsModel
        Parameters at convergence, with a nondecreasing log-likelihood
        trace.  A single observed pattern yields clamped estimates and a
        ``degenerate_comparisons`` flag.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    patterns, counts, (n1, n2, n_pairs) = _as_pattern_counts(comparisons)
    if n_pairs == 0:
        raise ValueError("at least one comparison is required")
    h = patterns.shape[1]
    if init is None:
        init = default_initial_model(h, n1, n2, n_pairs)
    m, u, zeta = init.m.copy(), init.u.copy(), init.zeta
    counts = counts.astype(float)
    total = counts.sum()
    flags = []
    if patterns.shape[0] == 1:
        flags.append("degenerate_comparisons")
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        a, b = _class_likelihoods(patterns, m, u)
        mix = zeta * a + (1 - zeta) * b
        ll = float(counts @ np.log(mix))
        trace.append(ll)
        g = zeta * a / mix
        wm = counts * g
        wu = counts * (1 - g)
        m = np.clip((wm @ patterns) / wm.sum(), PROB_FLOOR, 1 - PROB_FLOOR)
        u = np.clip((wu @ patterns) / wu.sum(), PROB_FLOOR, 1 - PROB_FLOOR)
        zeta = float(np.clip(wm.sum() / total, PROB_FLOOR, 1 - PROB_FLOOR))
        if len(trace) >= 2:
            prev, cur = trace[-2], trace[-1]
            if abs(cur - prev) < tol * (abs(prev) + 1e-12):
                converged = True
                break
    if not converged:
        flags.append("not_converged")
    return FsModel(
        m=m,
        u=u,
        zeta=zeta,
        loglik_trace=tuple(trace),
        n_iter=it,
        converged=converged,
        flags=tuple(flags),
    )


def likelihood_ratio(q, model):
    """Likelihood ratio psi of one agreement vector, computed in log space."""
    q = np.asarray(q, dtype=float)
    log_psi = float(
        q @ (np.log(model.m) - np.log(model.u))
        + (1 - q) @ (np.log(1 - model.m) - np.log(1 - model.u))
    )
    return math.exp(log_psi)


def posterior_match_prob(psi, zeta):
    """Posterior match probability zeta*psi / (1 - zeta + zeta*psi)."""
    psi = np.asarray(psi, dtype=float)
    if np.any(psi <= 0):
        raise ValueError("psi must be positive")
    if not 0 < zeta < 1:
        raise ValueError("zeta must lie in (0, 1)")
    out = zeta * psi / (1 - zeta + zeta * psi)
    return float(out) if out.ndim == 0 else out


def score_comparisons(comparisons, model):
    """Posterior match probability for every pair of a comparison set."""
    codes = comparisons._codes()
    h = comparisons.n_fields
    uniq = np.unique(codes)
    patterns = ((uniq[:, None] >> np.arange(h)[None, :]) & 1).astype(float)
    a, b = _class_likelihoods(patterns, model.m, model.u)
    post = model.zeta * a / (model.zeta * a + (1 - model.zeta) * b)
    lookup = np.zeros(int(codes.max(initial=0)) + 1)
    lookup[uniq] = post
    return lookup[codes]


def decide_links(comparisons, scores, threshold=0.5, one_to_one=True,
                 domains=None):
    """Turn scored pairs into a one-to-one set of declared links.

    Pairs scoring at least ``threshold`` become candidates; candidates
    are accepted greedily by descending score (ties broken by the
    (row1, row2) pair order) while respecting one-to-one use of records.

    Parameters
    ----------
    comparisons : ComparisonSet
    scores : ndarray
        Score per pair, aligned with ``comparisons.pairs``.
    threshold : float
    one_to_one : bool
        When False candidates are kept as-is; the result must still form
        a valid one-to-one match set.
    domains : (ndarray, ndarray), optional
        Per-file domain codes; when given the block-diagonal constraint
        is asserted on the result.

    Returns
    -------
    MatchMatrix
    """
    scores = np.asarray(scores, dtype=float)
    if len(scores) != len(comparisons):
        raise ValueError("scores must align with comparisons")
    keep = np.flatnonzero(scores >= threshold)
    pairs = comparisons.pairs[keep]
    kept_scores = scores[keep]
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -kept_scores))
    if one_to_one:
        used_rows = np.zeros(comparisons.n1, dtype=bool)
        used_cols = np.zeros(comparisons.n2, dtype=bool)
        links = []
        for i in order:
            j, jp = pairs[i]
            if used_rows[j] or used_cols[jp]:
                continue
            used_rows[j] = True
            used_cols[jp] = True
            links.append((int(j), int(jp)))
    else:
        links = [(int(j), int(jp)) for j, jp in pairs[order]]
    if domains is not None:
        check_block_diagonal(links, domains[0], domains[1])
    return MatchMatrix(n1=comparisons.n1, n2=comparisons.n2, links=tuple(links))


def run_fs_linkage(f1, f2, key_fields=None, threshold=0.5, tol=1e-6,
                   max_iter=1000, init=None):
    """Full pipeline: comparisons, EM fit, scoring, one-to-one decisions.

    Returns (MatchMatrix, FsModel, summary dict); the summary records the
    candidate scores' source sizes, iteration count and declared matches.
    """
    cs = build_comparisons(f1, f2, key_fields=key_fields)
    model = fit_em(cs, init=init, tol=tol, max_iter=max_iter)
    scores = score_comparisons(cs, model)
    links = decide_links(
        cs, scores, threshold=threshold, domains=(f1.domain, f2.domain)
    )
    summary = {
        "n_pairs": len(cs),
        "n_iter": model.n_iter,
        "converged": model.converged,
        "n_declared": links.n_links,
        "m": model.m.tolist(),
        "u": model.u.tolist(),
        "zeta": model.zeta,
    }
    return links, model, summary
