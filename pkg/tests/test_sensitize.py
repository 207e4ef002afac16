import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapmeter.core import AnonymizedRow, equivalence_classes, verify_p_sensitivity
from gapmeter.errors import ParameterError, StateError
from gapmeter.sensitize import RiskReport, SensitizeConfig, homogeneity_fraction, p_sensitize
from walkthrough import TABLE_9, TABLE_10, WALKTHROUGH_TAGS


def test_walkthrough_sensitization():
    out, report = p_sensitize(TABLE_9, SensitizeConfig(p=2, seed=5, labels=("white", "black")))
    assert report.n_perturbed == 1
    assert report.homogeneity_fraction == 0.5
    assert report.n_suppressed == 0
    assert verify_p_sensitivity(out, 2)
    # Only the homogeneous (1, 1.5) class changes, and only by one label flip.
    changed = [(a, b) for a, b in zip(TABLE_9, out) if a.group != b.group]
    assert len(changed) == 1
    assert changed[0][0].qi == (1.0, 1.5)
    assert changed[0][1].group == "black"
    assert [r.qi for r in out] == [r.qi for r in TABLE_9]
    assert [r.nid for r in out] == [r.nid for r in TABLE_9]


def test_wider_alphabet_still_reaches_two_distinct():
    out, _ = p_sensitize(TABLE_9, SensitizeConfig(p=2, seed=11, labels=WALKTHROUGH_TAGS))
    assert verify_p_sensitivity(out, 2)


def test_already_sensitive_is_untouched():
    out, report = p_sensitize(TABLE_10, SensitizeConfig(p=2, seed=1, labels=("white", "black")))
    assert out == TABLE_10
    assert report.n_perturbed == 0


def test_idempotence():
    cfg = SensitizeConfig(p=2, seed=8, labels=WALKTHROUGH_TAGS)
    once, _ = p_sensitize(TABLE_9, cfg)
    twice, report = p_sensitize(once, cfg)
    assert twice == once
    assert report.n_perturbed == 0


def test_seeded_determinism():
    cfg = SensitizeConfig(p=2, seed=123, labels=WALKTHROUGH_TAGS)
    assert p_sensitize(TABLE_9, cfg) == p_sensitize(TABLE_9, cfg)


def test_small_classes_are_suppressed():
    rows = TABLE_9 + [AnonymizedRow(nid=99, qi=(9.0, 9.0), group="white")]
    out, report = p_sensitize(rows, SensitizeConfig(p=2, seed=2, labels=("white", "black")))
    assert report.n_suppressed == 1
    assert all(r.nid != 99 for r in out)
    assert verify_p_sensitivity(out, 2)
    assert report.max_linkage_prob == 0.5


def test_all_classes_too_small_rejected():
    rows = [AnonymizedRow(nid=i, qi=(float(i),), group="white") for i in range(3)]
    with pytest.raises(StateError):
        p_sensitize(rows, SensitizeConfig(p=2, seed=0, labels=("white", "black")))


def test_invalid_configs_rejected():
    with pytest.raises(ParameterError):
        SensitizeConfig(p=4, labels=("a", "b", "c"))
    with pytest.raises(ParameterError):
        SensitizeConfig(p=0)
    with pytest.raises(ParameterError):
        SensitizeConfig(p=1, labels=("a", "a"))


def test_group_outside_alphabet_rejected():
    with pytest.raises(StateError):
        p_sensitize(TABLE_9, SensitizeConfig(p=2, seed=0, labels=("A", "B")))


def test_missing_group_rejected():
    rows = [AnonymizedRow(nid=1, qi=(1.0,)), AnonymizedRow(nid=2, qi=(1.0,), group="A")]
    with pytest.raises(StateError):
        p_sensitize(rows, SensitizeConfig(p=1))


class TestHomogeneityFraction:
    def test_walkthrough(self):
        assert homogeneity_fraction(TABLE_9) == 0.5

    def test_all_same_group(self):
        rows = [AnonymizedRow(nid=i, qi=(float(i % 2),), group="A") for i in range(6)]
        assert homogeneity_fraction(rows) == 1.0

    def test_sensitized_walkthrough_is_zero(self):
        assert homogeneity_fraction(TABLE_10) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            homogeneity_fraction([])


datasets = st.lists(
    st.tuples(
        st.sampled_from([0.0, 1.0, 2.0]),
        st.sampled_from([0.0, 1.0]),
        st.sampled_from(["A", "B", "C"]),
    ),
    min_size=2,
    max_size=80,
).map(
    lambda triples: [
        AnonymizedRow(nid=i, qi=(a, b), group=g) for i, (a, b, g) in enumerate(triples)
    ]
)


@settings(max_examples=80, deadline=None)
@given(datasets, st.sampled_from([1, 2, 3]), st.integers(min_value=0, max_value=2**32))
def test_output_always_p_sensitive_and_qi_invariant(rows, p, seed):
    cfg = SensitizeConfig(p=p, seed=seed)
    try:
        out, report = p_sensitize(rows, cfg)
    except StateError:
        # Every class smaller than p: nothing publishable.
        assert all(c.size < p for c in equivalence_classes(rows))
        return
    assert verify_p_sensitivity(out, p)
    assert isinstance(report, RiskReport)
    kept = {r.nid: r for r in out}
    for row in rows:
        if row.nid in kept:
            assert kept[row.nid].qi == row.qi
    # Perturbations cannot be fewer than the per-class distinct-value deficit.
    deficit = sum(
        p - c.distinct_sensitive
        for c in equivalence_classes(rows)
        if c.size >= p and c.distinct_sensitive < p
    )
    assert report.n_perturbed >= deficit
