"""Core data types shared across the linkage and small-area estimation stack.

Record files hold categorical key values (1..k per field, 0 when missing),
a 1-based area/domain code per record and optional response / covariate
columns.  Declared and true links are one-to-one sets of (row1, row2) pairs.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

#: Sentinel for a missing key value.  Valid category codes are 1..k.
MISSING = 0


@dataclass(frozen=True)
class KeyFieldSchema:
    """One categorical key field used to compare records across files."""

    name: str
    cardinality: int
    missing_allowed: bool = True

    def __post_init__(self):
        if not self.name:
            raise ValueError("key field name must be non-empty")
        if int(self.cardinality) < 2:
            raise ValueError(f"key field {self.name!r}: cardinality must be >= 2")


def check_key_schema(schema):
    """Validate a sequence of key-field schemas and return it as a list.

    Raises ValueError when two fields share a name.
    """
    schema = list(schema)
    dupes = sorted(n for n, c in Counter(f.name for f in schema).items() if c > 1)
    if dupes:
        raise ValueError(f"duplicate key field names: {dupes}")
    return schema


def _frozen_array(values, dtype):
    arr = np.ascontiguousarray(np.asarray(values, dtype=dtype))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RecordFile:
    """A file of records: ids, key values, domain codes and optional y / x.

    Parameters
    ----------
    ids : tuple of str
        Unique record identifiers.
    key_values : ndarray, shape (n, h)
        Category codes, each entry MISSING (0) or in 1..k_l for field l.
    domain : ndarray, shape (n,)
        1-based domain codes in 1..n_domains.
    n_domains : int
        Number of domains shared by the file pair.
    y : ndarray or None
        Optional per-record response.
    x : ndarray or None
        Optional (n, p) covariate matrix.
    domain_labels : tuple of str or None
        Human-readable domain names, index d-1 labels domain d.
    """

    ids: tuple
    key_values: np.ndarray
    domain: np.ndarray
    n_domains: int
    y: np.ndarray = None
    x: np.ndarray = None
    domain_labels: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        kv = _frozen_array(self.key_values, np.int32)
        if kv.ndim != 2:
            raise ValueError("key_values must be a 2-d array")
        dom = _frozen_array(self.domain, np.int32)
        if dom.shape != (kv.shape[0],):
            raise ValueError("domain must have one entry per record")
        if len(self.ids) != kv.shape[0]:
            raise ValueError("ids must have one entry per record")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        object.__setattr__(self, "key_values", kv)
        object.__setattr__(self, "domain", dom)
        if self.y is not None:
            yv = _frozen_array(self.y, float)
            if yv.shape != (kv.shape[0],):
                raise ValueError("y must have one entry per record")
            object.__setattr__(self, "y", yv)
        if self.x is not None:
            xv = np.asarray(self.x, dtype=float)
            if xv.ndim == 1:
                xv = xv[:, None]
            if xv.shape[0] != kv.shape[0]:
                raise ValueError("x must have one row per record")
            object.__setattr__(self, "x", _frozen_array(xv, float))
        if self.domain_labels is not None:
            labels = tuple(self.domain_labels)
            if len(labels) != self.n_domains:
                raise ValueError("domain_labels must have n_domains entries")
            object.__setattr__(self, "domain_labels", labels)

    @property
    def n_records(self):
        return self.key_values.shape[0]

    @property
    def n_key_fields(self):
        return self.key_values.shape[1]

    def domain_rows(self, d):
        """Row indices of records in 1-based domain ``d``."""
        return np.flatnonzero(self.domain == d)


def validate_file(file, schema):
    """Check a record file against its key-field schemas.

    Returns a list of human-readable violations (bad category codes,
    duplicate ids, out-of-range domains).  Empty list means the file is
    valid.  Structural mismatches (wrong number of key columns) raise.
    """
    schema = check_key_schema(schema)
    if file.n_key_fields != len(schema):
        raise ValueError(
            f"file has {file.n_key_fields} key columns, schema declares {len(schema)}"
        )
    problems = []
    for rid, count in Counter(file.ids).items():
        if count > 1:
            problems.append(f"duplicate id: {rid}")
    kv = file.key_values
    for l, fld in enumerate(schema):
        col = kv[:, l]
        bad = (col < 0) | (col > fld.cardinality)
        if not fld.missing_allowed:
            bad |= col == MISSING
        for i in np.flatnonzero(bad):
            problems.append(
                f"record {file.ids[i]}: field {fld.name!r}: invalid category code {col[i]}"
            )
    out = (file.domain < 1) | (file.domain > file.n_domains)
    for i in np.flatnonzero(out):
        problems.append(f"record {file.ids[i]}: invalid domain {file.domain[i]}")
    return problems


def _checked_pairs(pairs, n1, n2, what):
    pairs = tuple(sorted((int(j), int(jp)) for j, jp in pairs))
    rows = Counter(j for j, _ in pairs)
    cols = Counter(jp for _, jp in pairs)
    dup_rows = sorted(j for j, c in rows.items() if c > 1)
    dup_cols = sorted(jp for jp, c in cols.items() if c > 1)
    if dup_rows or dup_cols:
        raise ValueError(
            f"{what} must be one-to-one; repeated rows {dup_rows}, columns {dup_cols}"
        )
    for j, jp in pairs:
        if not (0 <= j < n1 and 0 <= jp < n2):
            raise ValueError(f"{what}: pair ({j}, {jp}) out of range for sizes ({n1}, {n2})")
    return pairs


@dataclass(frozen=True)
class MatchMatrix:
    """A one-to-one set of declared links between two files.

    ``links`` holds (row1, row2) pairs of 0-based record positions; each
    row appears in at most one pair on either side.
    """

    n1: int
    n2: int
    links: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "links", _checked_pairs(self.links, self.n1, self.n2, "links")
        )

    @property
    def n_links(self):
        return len(self.links)

    def row_to_col(self):
        """Dict mapping linked file-1 rows to their file-2 partner."""
        return {j: jp for j, jp in self.links}

    def col_of_row_array(self):
        """Array of file-2 partners per file-1 row, -1 when unlinked."""
        out = np.full(self.n1, -1, dtype=np.int64)
        for j, jp in self.links:
            out[j] = jp
        return out


@dataclass(frozen=True)
class TruthDeck:
    """Ground-truth co-reference pairs, one-to-one like a match matrix."""

    n1: int
    n2: int
    true_links: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self,
            "true_links",
            _checked_pairs(self.true_links, self.n1, self.n2, "true links"),
        )

    @property
    def n_links(self):
        return len(self.true_links)


def check_block_diagonal(pairs, domain1, domain2):
    """Raise when any pair crosses domains (links must stay within blocks)."""
    domain1 = np.asarray(domain1)
    domain2 = np.asarray(domain2)
    for j, jp in pairs:
        if domain1[j] != domain2[jp]:
            raise ValueError(
                f"pair ({j}, {jp}) crosses domains {domain1[j]} != {domain2[jp]}"
            )


@dataclass(frozen=True)
class LinkErrorReport:
    """Link-quality metrics of a declared match set against ground truth.

    ``missed_link_rate`` counts true pairs absent from the declared set
    (a falsely relinked record therefore counts as missed).  The
    operational companion ``unlinked_truth_rate`` counts true pairs whose
    file-1 record was left without any declared link.
    """

    false_link_rate: float
    missed_link_rate: float
    n_declared: int
    n_truth: int
    unlinked_truth_rate: float
    flags: tuple = ()


def link_error_rates(est, truth):
    """Compare declared links with a truth deck.

    Parameters
    ----------
    est : MatchMatrix
        Declared links.
    truth : TruthDeck
        Ground-truth links over the same file pair.

    Returns
    -------
    LinkErrorReport
    """
    if (est.n1, est.n2) != (truth.n1, truth.n2):
        raise ValueError("declared links and truth deck refer to different file pairs")
    true_set = set(truth.true_links)
    if not true_set:
        raise ValueError("truth deck is empty: no ground truth to compare against")
    est_set = set(est.links)
    n_declared = len(est_set)
    flags = ()
    if n_declared == 0:
        false_rate = 0.0
        flags = ("no_declared_links",)
    else:
        false_rate = len(est_set - true_set) / n_declared
    missed_rate = len(true_set - est_set) / len(true_set)
    linked_rows = {j for j, _ in est_set}
    unlinked = sum(1 for j, _ in true_set if j not in linked_rows)
    return LinkErrorReport(
        false_link_rate=false_rate,
        missed_link_rate=missed_rate,
        n_declared=n_declared,
        n_truth=len(true_set),
        unlinked_truth_rate=unlinked / len(true_set),
        flags=flags,
    )
