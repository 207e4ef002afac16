"""Six-step simulation harness quantifying anonymization's cost in power.

One run walks the whole measurement pipeline on synthetic data:

1. generate contact-level bookings (guests split uniformly over groups A/B/C,
   hosts split evenly over control/treatment, acceptance Bernoulli with a
   group base rate plus a treatment lift for groups B and C),
2. collapse to per-guest accept/reject counts by arm,
3. k-anonymize the counts,
4. p-sensitize the group labels,
5. expand the anonymized counts back to contact level, resolving fractional
   counts with weighted coin tosses,
6. estimate the experiment effect by interaction-term OLS on groups A and B.

The grid runner repeats this for every (k, N, effect size) cell, aggregating
power, effect-distribution summaries, homogeneity exposure, and suppression.
Runs own private generators derived from ``(seed, run_index)``, so cells
sharing a seed see identical synthetic data across k values and results are
reproducible run-for-run regardless of parallelism.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from gapmeter.anonymize import AnonymizeConfig, anonymize_counts
from gapmeter.core import (
    ARM_CONTROL,
    ARM_TREATMENT,
    GROUPS,
    AnonymizedRow,
    ContactRecord,
    GuestAggregate,
)
from gapmeter.errors import GapmeterError, ParameterError, SchemaError, SimulationError, StateError
from gapmeter.sensitize import sensitize_inverse
from gapmeter.stats import EffectEstimate, RunSummary, estimate_effect_arrays, power, summarize_runs

#: Invented defaults keeping every treated probability inside (0, 1) across
#: the usual effect grids; group A has the highest acceptance rate.
DEFAULT_BASE_ACCEPT = {"A": 0.80, "B": 0.74, "C": 0.70}

_GROUP_CODE = {g: i for i, g in enumerate(GROUPS)}

# Cell layout shared by aggregation and expansion:
# 0 = accepted/treatment, 1 = rejected/treatment, 2 = accepted/control, 3 = rejected/control.
_CELL_TREAT = np.array([True, True, False, False])
_CELL_ACCEPT = np.array([True, False, True, False])


@dataclass(frozen=True)
class SimConfig:
    n_contacts: int
    k: int
    p: int
    effect_size_pp: float
    n_runs: int
    base_accept: Mapping[str, float] = field(
        default_factory=lambda: dict(DEFAULT_BASE_ACCEPT)
    )
    contacts_per_guest_mean: float = 2.0
    seed: int = 0
    max_suppression_fraction: float = 0.02

    def __post_init__(self) -> None:
        if self.n_contacts < 1:
            raise ParameterError(f"n_contacts must be >= 1, got {self.n_contacts}")
        if self.k < 1 or self.p < 1:
            raise ParameterError(f"k and p must be >= 1, got k={self.k}, p={self.p}")
        if self.p > len(GROUPS):
            raise ParameterError(f"p={self.p} exceeds the {len(GROUPS)} group labels")
        if self.n_runs < 1:
            raise ParameterError(f"n_runs must be >= 1, got {self.n_runs}")
        if self.contacts_per_guest_mean < 1.0:
            raise ParameterError(
                f"contacts_per_guest_mean must be >= 1, got {self.contacts_per_guest_mean}"
            )
        if set(self.base_accept) != set(GROUPS):
            raise ParameterError(f"base_accept must have exactly the keys {GROUPS}")
        for g in GROUPS:
            if not 0.0 < self.base_accept[g] < 1.0:
                raise ParameterError(f"base_accept[{g}] must be in (0, 1)")
        if not (
            self.base_accept["A"] >= self.base_accept["B"]
            and self.base_accept["A"] >= self.base_accept["C"]
        ):
            raise ParameterError("group A must have the highest base acceptance rate")
        for g in GROUPS:
            treated = acceptance_probability(self, g, ARM_TREATMENT)
            if not 0.0 < treated < 1.0:
                raise ParameterError(
                    f"treated acceptance probability for group {g} is {treated}, "
                    "outside (0, 1); shrink the effect size or base rates"
                )


@dataclass(frozen=True)
class RunResult:
    """Outcome of one full pipeline run."""

    estimate: EffectEstimate
    homogeneity_fraction: float
    suppressed_fraction: float


@dataclass(frozen=True)
class GridSummary:
    """Aggregates for one (k, N, effect size) grid cell."""

    key: tuple[int, int, float]
    power: float
    run_summary: RunSummary
    mean_homogeneity_fraction: float
    mean_suppressed_fraction: float


def acceptance_probability(cfg: SimConfig, group: str, arm: str) -> float:
    """Acceptance probability for one (group, arm) cell.

    Treatment leaves group A unchanged, lifts group B by the full effect
    magnitude, and group C by half of it.
    """
    base = cfg.base_accept[group]
    if arm != ARM_TREATMENT:
        return base
    lift = abs(cfg.effect_size_pp) / 100.0
    if group == "B":
        return base + lift
    if group == "C":
        return base + lift / 2.0
    return base


@dataclass
class _Contacts:
    """Struct-of-arrays contact table used on the hot path."""

    guest_id: np.ndarray
    group: np.ndarray  # int8 codes into GROUPS
    treat: np.ndarray
    accepted: np.ndarray

    def __len__(self) -> int:
        return len(self.guest_id)

    def to_records(self) -> list[ContactRecord]:
        return [
            ContactRecord(
                guest_id=int(self.guest_id[i]),
                guest_group=GROUPS[self.group[i]],
                host_arm=ARM_TREATMENT if self.treat[i] else ARM_CONTROL,
                accepted=bool(self.accepted[i]),
            )
            for i in range(len(self.guest_id))
        ]

    @classmethod
    def from_records(cls, contacts: Sequence[ContactRecord]) -> "_Contacts":
        bad = sorted({c.guest_group for c in contacts} - set(GROUPS))
        if bad:
            raise ParameterError(f"guest groups must be among {GROUPS}, found {bad}")
        return cls(
            guest_id=np.fromiter((c.guest_id for c in contacts), dtype=np.int64),
            group=np.fromiter((_GROUP_CODE[c.guest_group] for c in contacts), dtype=np.int8),
            treat=np.fromiter((c.host_arm == ARM_TREATMENT for c in contacts), dtype=bool),
            accepted=np.fromiter((c.accepted for c in contacts), dtype=bool),
        )


def _stage_rngs(cfg: SimConfig, run_index: int) -> tuple[np.random.Generator, int, int, np.random.Generator]:
    """Private per-stage generators/seeds for one (config, run) pair."""
    children = np.random.SeedSequence([cfg.seed, run_index]).spawn(4)
    return (
        np.random.default_rng(children[0]),
        int(children[1].generate_state(1, np.uint64)[0]),
        int(children[2].generate_state(1, np.uint64)[0]),
        np.random.default_rng(children[3]),
    )


def _draw_guest_sizes(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-guest contact counts: i.i.d. shifted geometric, truncated so the
    totals hit n_contacts exactly."""
    target = cfg.n_contacts
    p = 1.0 / cfg.contacts_per_guest_mean
    chunks: list[np.ndarray] = []
    total = 0
    while total < target:
        want = max(64, int((target - total) * p) + 16)
        chunk = rng.geometric(p, size=want)
        chunks.append(chunk)
        total += int(chunk.sum())
    sizes = np.concatenate(chunks)
    cum = np.cumsum(sizes)
    last = int(np.searchsorted(cum, target))
    sizes = sizes[: last + 1].copy()
    sizes[last] -= int(cum[last]) - target
    return sizes


def _generate_arrays(cfg: SimConfig, rng: np.random.Generator) -> _Contacts:
    sizes = _draw_guest_sizes(cfg, rng)
    n_guests = len(sizes)
    guest_groups = rng.integers(0, len(GROUPS), size=n_guests).astype(np.int8)
    guest_id = np.repeat(np.arange(n_guests, dtype=np.int64), sizes)
    group = np.repeat(guest_groups, sizes)
    treat = rng.random(cfg.n_contacts) < 0.5

    probs = np.empty((len(GROUPS), 2))
    for g in GROUPS:
        probs[_GROUP_CODE[g], 0] = acceptance_probability(cfg, g, ARM_CONTROL)
        probs[_GROUP_CODE[g], 1] = acceptance_probability(cfg, g, ARM_TREATMENT)
    accepted = rng.random(cfg.n_contacts) < probs[group, treat.astype(np.int8)]
    return _Contacts(guest_id=guest_id, group=group, treat=treat, accepted=accepted)


def generate_contacts(cfg: SimConfig, run_index: int) -> list[ContactRecord]:
    """Synthesize the contact-level dataset for one run, deterministically."""
    rng, _, _, _ = _stage_rngs(cfg, run_index)
    return _generate_arrays(cfg, rng).to_records()


def _aggregate_arrays(contacts: _Contacts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse contacts to (guest_ids, guest group codes, counts matrix)."""
    ids = contacts.guest_id
    if len(ids) > 1 and (np.diff(ids) >= 0).all():
        # Generated data arrives grouped by guest; skip the sort.
        boundary = np.empty(len(ids), dtype=bool)
        boundary[0] = True
        np.not_equal(ids[1:], ids[:-1], out=boundary[1:])
        inverse = np.cumsum(boundary) - 1
        uniq = ids[boundary]
    else:
        uniq, inverse = np.unique(ids, return_inverse=True)
    cell = np.where(
        contacts.treat,
        np.where(contacts.accepted, 0, 1),
        np.where(contacts.accepted, 2, 3),
    )
    counts = np.bincount(inverse * 4 + cell, minlength=len(uniq) * 4).reshape(-1, 4)
    guest_group = np.zeros(len(uniq), dtype=np.int8)
    guest_group[inverse] = contacts.group
    if not np.array_equal(guest_group[inverse], contacts.group):
        raise ParameterError("contacts disagree on some guest's group")
    return uniq, guest_group, counts.astype(np.float64)


def aggregate_guests(contacts: Sequence[ContactRecord]) -> list[GuestAggregate]:
    """One aggregate row per guest; the four counts partition that guest's contacts."""
    if not contacts:
        raise ParameterError("contacts must be non-empty")
    uniq, guest_group, counts = _aggregate_arrays(_Contacts.from_records(contacts))
    return [
        GuestAggregate(
            guest_id=int(uniq[i]),
            guest_group=GROUPS[guest_group[i]],
            n_accept_treat=int(counts[i, 0]),
            n_reject_treat=int(counts[i, 1]),
            n_accept_ctrl=int(counts[i, 2]),
            n_reject_ctrl=int(counts[i, 3]),
        )
        for i in range(len(uniq))
    ]


def _expand_arrays(
    counts: np.ndarray, group_codes: np.ndarray, rng: np.random.Generator
) -> _Contacts:
    if np.any(counts < 0):
        raise StateError("counts must be >= 0")
    base = np.floor(counts)
    frac = counts - base
    totals = (base + (rng.random(counts.shape) < frac)).astype(np.int64)

    ids = []
    for j in range(4):
        ids.append(np.repeat(np.arange(counts.shape[0], dtype=np.int64), totals[:, j]))
    lengths = [len(part) for part in ids]
    guest_id = np.concatenate(ids)
    treat = np.repeat(_CELL_TREAT, lengths)
    accepted = np.repeat(_CELL_ACCEPT, lengths)
    group = group_codes[guest_id]
    return _Contacts(guest_id=guest_id, group=group, treat=treat, accepted=accepted)


def expand_contacts(rows: Sequence[AnonymizedRow], seed: int) -> list[ContactRecord]:
    """Re-inflate anonymized per-arm counts into contact rows.

    Each of the four cells emits ``floor(v)`` contacts plus one more with
    probability ``v - floor(v)``. The emitted guest identifier is the row's
    position in ``rows``, not the nid, so expansion never links back to it.
    """
    if not rows:
        raise ParameterError("rows must be non-empty")
    counts = np.empty((len(rows), 4), dtype=np.float64)
    codes = np.empty(len(rows), dtype=np.int8)
    for i, row in enumerate(rows):
        if len(row.qi) != 4:
            raise SchemaError(
                f"expand needs the 4-ary per-arm schema, row nid={row.nid} has {len(row.qi)}"
            )
        if row.group is None:
            raise StateError(f"row nid={row.nid} has no group label")
        if row.group not in _GROUP_CODE:
            raise StateError(
                f"row nid={row.nid} carries group {row.group!r}, expected one of {GROUPS}"
            )
        counts[i] = row.qi
        codes[i] = _GROUP_CODE[row.group]
    return _expand_arrays(counts, codes, np.random.default_rng(seed)).to_records()


def _estimate_ab(contacts: _Contacts) -> EffectEstimate:
    ab = contacts.group <= 1
    return estimate_effect_arrays(
        contacts.group[ab] == 1, contacts.treat[ab], contacts.accepted[ab]
    )


def simulate_run(cfg: SimConfig, run_index: int) -> RunResult:
    """Execute the full generate->anonymize->sensitize->expand->estimate pipeline."""
    gen_rng, anon_seed, sens_seed, exp_rng = _stage_rngs(cfg, run_index)
    contacts = _generate_arrays(cfg, gen_rng)
    _, guest_group, counts = _aggregate_arrays(contacts)
    n_guests = len(guest_group)

    acfg = AnonymizeConfig(
        k=cfg.k, max_suppression_fraction=cfg.max_suppression_fraction, seed=anon_seed
    )
    qi_out, keep, class_id, areport = anonymize_counts(counts, acfg)
    # Partitions with identical means merge into one equivalence class, so
    # regroup at the (cheap) partition level instead of re-sorting all rows.
    first_row = np.empty(areport.n_classes, dtype=np.int64)
    first_row[class_id[::-1]] = np.arange(len(class_id) - 1, -1, -1)
    _, class_to_group = np.unique(qi_out[first_row], axis=0, return_inverse=True)
    codes, keep_mask, _, homogeneity = sensitize_inverse(
        class_to_group.ravel()[class_id],
        guest_group[keep].astype(np.int64),
        len(GROUPS),
        cfg.p,
        sens_seed,
    )
    expanded = _expand_arrays(qi_out[keep_mask], codes[keep_mask].astype(np.int8), exp_rng)
    n_dropped = areport.n_suppressed + int(len(keep) - keep_mask.sum())
    return RunResult(
        estimate=_estimate_ab(expanded),
        homogeneity_fraction=homogeneity,
        suppressed_fraction=n_dropped / n_guests,
    )


def simulate_run_plain(cfg: SimConfig, run_index: int) -> EffectEstimate:
    """Estimate directly on the generated contacts, skipping anonymization.

    Uses the same generation stream as :func:`simulate_run`, so matched
    run indices see identical synthetic data.
    """
    gen_rng, _, _, _ = _stage_rngs(cfg, run_index)
    return _estimate_ab(_generate_arrays(cfg, gen_rng))


def _run_cell_serial(cfg: SimConfig) -> tuple[list[RunResult], list[str]]:
    results: list[RunResult] = []
    failures: list[str] = []
    for r in range(cfg.n_runs):
        try:
            results.append(simulate_run(cfg, r))
        except GapmeterError as exc:
            failures.append(f"run {r}: {exc}")
    return results, failures


def _pool_run(args: tuple[SimConfig, int]) -> tuple[int, RunResult | str]:
    cfg, r = args
    try:
        return r, simulate_run(cfg, r)
    except GapmeterError as exc:
        return r, f"run {r}: {exc}"


def _run_cell_parallel(cfg: SimConfig, jobs: int) -> tuple[list[RunResult], list[str]]:
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        outcomes = list(pool.map(_pool_run, ((cfg, r) for r in range(cfg.n_runs)), chunksize=4))
    outcomes.sort(key=lambda pair: pair[0])
    results = [res for _, res in outcomes if isinstance(res, RunResult)]
    failures = [res for _, res in outcomes if isinstance(res, str)]
    return results, failures


#: Fraction of failed runs above which a grid cell is rejected outright.
MAX_FAILED_RUN_FRACTION = 0.05


def run_grid(
    grid: Sequence[SimConfig],
    jobs: int = 1,
    on_cell: Callable[[int, GridSummary], None] | None = None,
) -> list[GridSummary]:
    """Run every grid cell and aggregate per-cell summaries.

    The step-6 regression measures group B's treatment lift relative to A,
    which is positive when the gap narrows; cell summaries report observed
    effects as signed gap changes oriented to the configured effect's sign,
    so a configured effect of -1.5 pp yields mean observed effects near -1.5.

    Individual run failures are tolerated up to ``MAX_FAILED_RUN_FRACTION``
    of a cell's runs; beyond that the cell (and the grid) fails hard.
    ``on_cell`` is invoked after each completed cell, in order.
    """
    if not grid:
        raise ParameterError("grid must be non-empty")
    for cfg in grid:
        if cfg.effect_size_pp == 0:
            raise ParameterError("grid cells need a nonzero effect size for bias reporting")
    summaries: list[GridSummary] = []
    for index, cfg in enumerate(grid):
        if jobs > 1:
            results, failures = _run_cell_parallel(cfg, jobs)
        else:
            results, failures = _run_cell_serial(cfg)
        if len(failures) > MAX_FAILED_RUN_FRACTION * cfg.n_runs:
            detail = "; ".join(failures[:5])
            raise SimulationError(
                f"cell k={cfg.k} n={cfg.n_contacts} effect={cfg.effect_size_pp}: "
                f"{len(failures)}/{cfg.n_runs} runs failed ({detail})"
            )
        estimates = [r.estimate for r in results]
        orientation = -1.0 if cfg.effect_size_pp < 0 else 1.0
        summary = GridSummary(
            key=(cfg.k, cfg.n_contacts, cfg.effect_size_pp),
            power=power(estimates),
            run_summary=summarize_runs(
                [orientation * e.c for e in estimates], cfg.effect_size_pp
            ),
            mean_homogeneity_fraction=float(
                np.mean([r.homogeneity_fraction for r in results])
            ),
            mean_suppressed_fraction=float(
                np.mean([r.suppressed_fraction for r in results])
            ),
        )
        summaries.append(summary)
        if on_cell is not None:
            on_cell(index, summary)
    return summaries
