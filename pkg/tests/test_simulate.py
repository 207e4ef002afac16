import numpy as np
import pytest

from gapmeter.core import ARM_CONTROL, ARM_TREATMENT, AnonymizedRow, ContactRecord
from gapmeter.errors import ParameterError, SchemaError, SimulationError, StateError
from gapmeter.simulate import (
    DEFAULT_BASE_ACCEPT,
    SimConfig,
    acceptance_probability,
    aggregate_guests,
    expand_contacts,
    generate_contacts,
    run_grid,
    simulate_run,
    simulate_run_plain,
)


def make_cfg(**overrides):
    base = dict(
        n_contacts=3000, k=2, p=2, effect_size_pp=-1.5, n_runs=4, seed=2026
    )
    base.update(overrides)
    return SimConfig(**base)


class TestAcceptanceProbability:
    def test_treatment_lift_is_group_specific(self):
        cfg = make_cfg(effect_size_pp=-2.0, base_accept={"A": 0.80, "B": 0.70, "C": 0.65})
        assert acceptance_probability(cfg, "B", ARM_TREATMENT) == pytest.approx(0.72)
        assert acceptance_probability(cfg, "C", ARM_TREATMENT) == pytest.approx(0.66)
        assert acceptance_probability(cfg, "A", ARM_TREATMENT) == 0.80
        for group in "ABC":
            assert acceptance_probability(cfg, group, ARM_CONTROL) == cfg.base_accept[group]

    def test_magnitude_is_used_regardless_of_sign(self):
        down = make_cfg(effect_size_pp=-1.0)
        up = make_cfg(effect_size_pp=1.0)
        assert acceptance_probability(down, "B", ARM_TREATMENT) == acceptance_probability(
            up, "B", ARM_TREATMENT
        )


class TestGenerateContacts:
    def test_exact_row_count_and_determinism(self):
        cfg = make_cfg(n_contacts=977)
        contacts = generate_contacts(cfg, run_index=3)
        assert len(contacts) == 977
        assert contacts == generate_contacts(cfg, run_index=3)
        assert contacts != generate_contacts(cfg, run_index=4)

    def test_group_shares_are_near_uniform(self):
        cfg = make_cfg(n_contacts=300_000)
        contacts = generate_contacts(cfg, run_index=0)
        guests = {c.guest_id: c.guest_group for c in contacts}
        counts = {g: 0 for g in "ABC"}
        for group in guests.values():
            counts[group] += 1
        n = len(guests)
        tolerance = 3 * np.sqrt(n * (1 / 3) * (2 / 3))
        for g in "ABC":
            assert abs(counts[g] - n / 3) < tolerance

    def test_zero_effect_means_no_arm_difference_for_b(self):
        cfg = make_cfg(n_contacts=400_000, effect_size_pp=0.0)
        contacts = generate_contacts(cfg, run_index=1)
        b_rows = [c for c in contacts if c.guest_group == "B"]
        by_arm = {ARM_CONTROL: [0, 0], ARM_TREATMENT: [0, 0]}
        for c in b_rows:
            by_arm[c.host_arm][0] += c.accepted
            by_arm[c.host_arm][1] += 1
        rates = {arm: acc / n for arm, (acc, n) in by_arm.items()}
        p = cfg.base_accept["B"]
        spread = 3 * np.sqrt(p * (1 - p) * sum(1 / n for _, n in by_arm.values()))
        assert abs(rates[ARM_TREATMENT] - rates[ARM_CONTROL]) < spread

    def test_probability_bounds_enforced(self):
        with pytest.raises(ParameterError, match="treated"):
            make_cfg(effect_size_pp=-30.0, base_accept={"A": 0.99, "B": 0.95, "C": 0.9})
        with pytest.raises(ParameterError, match="highest"):
            make_cfg(base_accept={"A": 0.5, "B": 0.7, "C": 0.4})
        with pytest.raises(ParameterError, match="keys"):
            make_cfg(base_accept={"A": 0.8, "B": 0.7})


class TestAggregateGuests:
    def test_counts_partition_one_guest(self):
        contacts = [
            ContactRecord(7, "B", ARM_TREATMENT, True),
            ContactRecord(7, "B", ARM_TREATMENT, False),
            ContactRecord(7, "B", ARM_CONTROL, False),
        ]
        (agg,) = aggregate_guests(contacts)
        assert (agg.n_accept_treat, agg.n_reject_treat, agg.n_accept_ctrl,
                agg.n_reject_ctrl) == (1, 1, 0, 1)
        assert agg.guest_group == "B"

    def test_totals_reconcile_with_input(self):
        cfg = make_cfg(n_contacts=1000)
        contacts = generate_contacts(cfg, run_index=0)
        aggregates = aggregate_guests(contacts)
        assert sum(sum(a.qi) for a in aggregates) == len(contacts)
        recount = {}
        for c in contacts:
            key = (c.guest_group, c.host_arm, c.accepted)
            recount[key] = recount.get(key, 0) + 1
        for group in "ABC":
            rows = [a for a in aggregates if a.guest_group == group]
            assert sum(a.n_accept_treat for a in rows) == recount.get(
                (group, ARM_TREATMENT, True), 0
            )
            assert sum(a.n_reject_ctrl for a in rows) == recount.get(
                (group, ARM_CONTROL, False), 0
            )

    def test_conflicting_groups_rejected(self):
        contacts = [
            ContactRecord(1, "A", ARM_CONTROL, True),
            ContactRecord(1, "B", ARM_CONTROL, True),
        ]
        with pytest.raises(ParameterError, match="group"):
            aggregate_guests(contacts)

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            aggregate_guests([])


class TestExpandContacts:
    def test_integral_counts_are_deterministic(self):
        row = AnonymizedRow(nid=1, qi=(2.0, 1.0, 0.0, 3.0), group="A")
        contacts = expand_contacts([row], seed=4)
        assert len(contacts) == 6
        tally = {}
        for c in contacts:
            key = (c.host_arm, c.accepted)
            tally[key] = tally.get(key, 0) + 1
        assert tally == {
            (ARM_TREATMENT, True): 2,
            (ARM_TREATMENT, False): 1,
            (ARM_CONTROL, False): 3,
        }

    def test_all_zero_counts_yield_no_contacts(self):
        row = AnonymizedRow(nid=1, qi=(0.0, 0.0, 0.0, 0.0), group="A")
        assert expand_contacts([row], seed=0) == []

    def test_fractional_count_is_a_weighted_coin(self):
        row = AnonymizedRow(nid=1, qi=(1.5, 0.0, 0.0, 0.0), group="B")
        extras = [len(expand_contacts([row], seed=s)) - 1 for s in range(10_000)]
        assert abs(np.mean(extras) - 0.5) < 0.02

    def test_round_trip_preserves_cell_totals(self):
        cfg = make_cfg(n_contacts=2000)
        aggregates = aggregate_guests(generate_contacts(cfg, run_index=2))
        rows = [
            AnonymizedRow(nid=i, qi=tuple(float(v) for v in a.qi), group=a.guest_group)
            for i, a in enumerate(aggregates)
        ]
        back = aggregate_guests(expand_contacts(rows, seed=3))

        def totals(aggs):
            out = {}
            for a in aggs:
                key = a.guest_group
                cells = out.setdefault(key, np.zeros(4))
                cells += np.asarray(a.qi, dtype=float)
            return {k: tuple(v) for k, v in out.items()}

        assert totals(back) == totals(aggregates)

    def test_wrong_arity_rejected(self):
        with pytest.raises(SchemaError):
            expand_contacts([AnonymizedRow(nid=1, qi=(1.0, 2.0), group="A")], seed=0)

    def test_missing_group_rejected(self):
        with pytest.raises(StateError):
            expand_contacts([AnonymizedRow(nid=1, qi=(1.0, 0.0, 0.0, 0.0))], seed=0)


class TestPipeline:
    def test_identity_at_k1_p1(self):
        cfg = make_cfg(n_contacts=6000, k=1, p=1, n_runs=3)
        for r in range(3):
            anonymized = simulate_run(cfg, r).estimate
            plain = simulate_run_plain(cfg, r)
            assert abs(anonymized.c - plain.c) <= 1e-12
            # Residual sums run in a different row order, so se and p agree
            # only to rounding.
            assert anonymized.p_value == pytest.approx(plain.p_value, abs=1e-12)
            assert anonymized.n_obs == plain.n_obs

    def test_grid_is_deterministic(self):
        grid = [make_cfg(k=k, n_runs=4) for k in (1, 3)]
        assert run_grid(grid) == run_grid(grid)

    def test_grid_summary_shape(self):
        (summary,) = run_grid([make_cfg(n_runs=4)])
        assert summary.key == (2, 3000, -1.5)
        assert 0.0 <= summary.power <= 1.0
        assert summary.run_summary.n_sim_runs == 4
        assert 0.0 <= summary.mean_homogeneity_fraction <= 1.0
        assert 0.0 <= summary.mean_suppressed_fraction <= 1.0

    def test_observed_effects_match_configured_sign(self):
        (summary,) = run_grid([make_cfg(n_contacts=30_000, k=1, p=1, n_runs=6,
                                        effect_size_pp=-2.5)])
        assert summary.run_summary.mean_c < 0

    def test_grid_fails_when_too_many_runs_fail(self):
        # 10 contacts cannot support k=9, so every run aborts.
        bad = make_cfg(n_contacts=10, k=9, p=1, n_runs=4)
        with pytest.raises(SimulationError):
            run_grid([bad])

    def test_zero_effect_cell_rejected(self):
        with pytest.raises(ParameterError):
            run_grid([make_cfg(effect_size_pp=0.0)])

    def test_empty_grid_rejected(self):
        with pytest.raises(ParameterError):
            run_grid([])

    def test_parallel_matches_serial(self):
        grid = [make_cfg(n_runs=4)]
        assert run_grid(grid, jobs=2) == run_grid(grid, jobs=1)


def test_default_base_accept_orders_groups():
    assert DEFAULT_BASE_ACCEPT["A"] >= DEFAULT_BASE_ACCEPT["B"] >= DEFAULT_BASE_ACCEPT["C"]
