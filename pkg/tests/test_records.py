import numpy as np
import pytest

from linksae.records import (
    MISSING,
    KeyFieldSchema,
    MatchMatrix,
    RecordFile,
    TruthDeck,
    check_block_diagonal,
    link_error_rates,
    validate_file,
)

SCHEMA = [
    KeyFieldSchema("day", 31),
    KeyFieldSchema("year", 101),
    KeyFieldSchema("gender", 2),
]


def make_file(key_values, domain=None, ids=None, n_domains=1, **kw):
    key_values = np.asarray(key_values)
    n = key_values.shape[0]
    if domain is None:
        domain = np.ones(n, dtype=int)
    if ids is None:
        ids = tuple(f"r{i}" for i in range(n))
    return RecordFile(
        ids=ids, key_values=key_values, domain=domain, n_domains=n_domains, **kw
    )


class TestSchema:
    def test_cardinality_must_be_at_least_two(self):
        with pytest.raises(ValueError):
            KeyFieldSchema("flag", 1)

    def test_duplicate_names_rejected(self):
        from linksae.records import check_key_schema

        with pytest.raises(ValueError, match="duplicate"):
            check_key_schema([KeyFieldSchema("a", 3), KeyFieldSchema("a", 4)])


class TestValidateFile:
    def test_valid_file_has_empty_report(self):
        f = make_file([[1, 5, 2], [3, 101, 1]])
        assert validate_file(f, SCHEMA) == []

    def test_code_beyond_cardinality_is_one_violation(self):
        schema = [KeyFieldSchema("a", 3)]
        f = make_file([[5]])
        report = validate_file(f, schema)
        assert len(report) == 1
        assert "invalid category code 5" in report[0]

    def test_duplicate_id_named_in_report(self):
        f = make_file([[1, 1, 1], [2, 2, 2]], ids=("dup", "dup"))
        report = validate_file(f, SCHEMA)
        assert len(report) == 1
        assert "dup" in report[0]

    def test_missing_allowed_by_default(self):
        f = make_file([[MISSING, 4, 1]])
        assert validate_file(f, SCHEMA) == []

    def test_missing_flagged_when_disallowed(self):
        schema = [KeyFieldSchema("a", 3, missing_allowed=False)]
        f = make_file([[MISSING]])
        assert len(validate_file(f, schema)) == 1

    def test_bad_domain_reported(self):
        f = make_file([[1, 1, 1]], domain=[4], n_domains=2)
        report = validate_file(f, SCHEMA)
        assert len(report) == 1
        assert "domain" in report[0]


class TestMatchMatrix:
    def test_one_to_one_enforced_on_rows(self):
        with pytest.raises(ValueError, match="one-to-one"):
            MatchMatrix(n1=3, n2=3, links=[(0, 0), (0, 1)])

    def test_one_to_one_enforced_on_columns(self):
        with pytest.raises(ValueError, match="one-to-one"):
            MatchMatrix(n1=3, n2=3, links=[(0, 1), (2, 1)])

    def test_out_of_range_pair_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            MatchMatrix(n1=2, n2=2, links=[(0, 5)])

    def test_random_construction_paths_stay_valid(self):
        # repeated add/remove/replace cycles always rebuild through the
        # validating constructor, so every reachable state is one-to-one
        rng = np.random.default_rng(7)
        d1 = rng.integers(1, 4, size=20)
        d2 = rng.integers(1, 4, size=25)
        links = {}
        for _ in range(300):
            j = int(rng.integers(20))
            same = np.flatnonzero(d2 == d1[j])
            if same.size == 0 or rng.random() < 0.3:
                links.pop(j, None)
            else:
                jp = int(rng.choice(same))
                if jp not in links.values():
                    links[j] = jp
            mm = MatchMatrix(n1=20, n2=25, links=list(links.items()))
            rows = [a for a, _ in mm.links]
            cols = [b for _, b in mm.links]
            assert len(set(rows)) == len(rows)
            assert len(set(cols)) == len(cols)
            check_block_diagonal(mm.links, d1, d2)

    def test_col_of_row_array(self):
        mm = MatchMatrix(n1=3, n2=4, links=[(2, 1)])
        assert mm.col_of_row_array().tolist() == [-1, -1, 1]


class TestLinkErrorRates:
    def test_perfect_agreement_gives_zero_rates(self):
        pairs = [(i, i) for i in range(10)]
        est = MatchMatrix(n1=10, n2=10, links=pairs)
        truth = TruthDeck(n1=10, n2=10, true_links=pairs)
        rep = link_error_rates(est, truth)
        assert rep.false_link_rate == 0.0
        assert rep.missed_link_rate == 0.0
        assert rep.n_declared == 10

    def test_operating_point_arithmetic(self):
        # 957 declared links of which 134 false against 1000 true pairs:
        # false 134/957, missed (1000 - 823)/1000, 43 rows left unlinked
        n = 1200
        truth = TruthDeck(n1=n, n2=n, true_links=[(i, i) for i in range(1000)])
        links = [(i, i) for i in range(823)]
        links += [(823 + i, 923 + i) for i in range(134)]
        est = MatchMatrix(n1=n, n2=n, links=links)
        rep = link_error_rates(est, truth)
        assert rep.n_declared == 957
        assert rep.false_link_rate == pytest.approx(134 / 957, abs=1e-12)
        assert rep.missed_link_rate == pytest.approx(177 / 1000, abs=1e-12)
        assert rep.unlinked_truth_rate == pytest.approx(43 / 1000, abs=1e-12)

    def test_empty_estimate_flagged(self):
        truth = TruthDeck(n1=5, n2=5, true_links=[(i, i) for i in range(5)])
        est = MatchMatrix(n1=5, n2=5, links=[])
        rep = link_error_rates(est, truth)
        assert rep.false_link_rate == 0.0
        assert rep.missed_link_rate == 1.0
        assert rep.n_declared == 0
        assert "no_declared_links" in rep.flags

    def test_empty_truth_is_an_error(self):
        est = MatchMatrix(n1=5, n2=5, links=[(0, 0)])
        truth = TruthDeck(n1=5, n2=5, true_links=[])
        with pytest.raises(ValueError, match="truth"):
            link_error_rates(est, truth)

    def test_identity_property_random_decks(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            perm = rng.permutation(50)[:n]
            pairs = [(i, int(perm[i])) for i in range(n)]
            est = MatchMatrix(n1=n, n2=50, links=pairs)
            truth = TruthDeck(n1=n, n2=50, true_links=pairs)
            rep = link_error_rates(est, truth)
            assert rep.false_link_rate == 0.0
            assert rep.missed_link_rate == 0.0
