"""Domain types, equivalence-class computation, and privacy verifiers.

Everything downstream (anonymization, sensitization, simulation, risk
reporting) is phrased in terms of the types defined here. The verifiers are
pure functions over immutable rows and are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gapmeter.errors import ParameterError, SchemaError, StateError

#: Canonical guest-group alphabet used by the simulation.
GROUPS = ("A", "B", "C")

#: Host experiment arms.
ARM_CONTROL = "control"
ARM_TREATMENT = "treatment"
ARMS = (ARM_CONTROL, ARM_TREATMENT)


@dataclass(frozen=True)
class ContactRecord:
    """One booking request sent from a guest to a host."""

    guest_id: int
    guest_group: str
    host_arm: str
    accepted: bool

    def __post_init__(self) -> None:
        if self.guest_id < 0:
            raise ParameterError(f"guest_id must be >= 0, got {self.guest_id}")
        if not self.guest_group:
            raise ParameterError("guest_group must be populated")
        if self.host_arm not in ARMS:
            raise ParameterError(f"host_arm must be one of {ARMS}, got {self.host_arm!r}")


@dataclass(frozen=True)
class GuestAggregate:
    """Per-guest contact counts split by experiment arm and outcome.

    Counts are integers before anonymization; microaggregation may later
    replace them with non-integral class means.
    """

    guest_id: int
    guest_group: str
    n_accept_treat: float
    n_reject_treat: float
    n_accept_ctrl: float
    n_reject_ctrl: float

    def __post_init__(self) -> None:
        if self.guest_id < 0:
            raise ParameterError(f"guest_id must be >= 0, got {self.guest_id}")
        if min(self.qi) < 0:
            raise ParameterError(f"contact counts must be >= 0, got {self.qi}")

    @property
    def qi(self) -> tuple[float, float, float, float]:
        """The quasi-identifier vector: every attribute except the group."""
        return (
            self.n_accept_treat,
            self.n_reject_treat,
            self.n_accept_ctrl,
            self.n_reject_ctrl,
        )


@dataclass(frozen=True)
class AnonymizedRow:
    """A k-anonymized row: random per-run identifier, microaggregated counts,
    and (after the join with tagging results) the sensitive group label."""

    nid: int
    qi: tuple[float, ...]
    group: str | None = None

    def with_group(self, group: str) -> "AnonymizedRow":
        return AnonymizedRow(nid=self.nid, qi=self.qi, group=group)


@dataclass(frozen=True)
class EquivalenceClass:
    """A maximal set of rows sharing identical quasi-identifier values."""

    qi_values: tuple[float, ...]
    member_nids: frozenset[int]
    sensitive_values: tuple[str, ...] = field(default=())

    @property
    def size(self) -> int:
        return len(self.member_nids)

    @property
    def distinct_sensitive(self) -> int:
        return len(set(self.sensitive_values))


def equivalence_classes(rows: list[AnonymizedRow]) -> list[EquivalenceClass]:
    """Partition rows into equivalence classes by exact qi equality.

    Classes are returned in order of first appearance. Microaggregation
    assigns the identical mean value to every member of a class, so exact
    floating-point equality is well-defined by construction.

    Raises
    ------
    ParameterError
        If ``rows`` is empty.
    SchemaError
        If rows carry quasi-identifier vectors of different arity.
    """
    if not rows:
        raise ParameterError("cannot partition an empty dataset")
    arity = len(rows[0].qi)
    buckets: dict[tuple[float, ...], list[AnonymizedRow]] = {}
    for row in rows:
        if len(row.qi) != arity:
            raise SchemaError(
                f"mixed qi arity: expected {arity} attributes, found {len(row.qi)}"
            )
        buckets.setdefault(row.qi, []).append(row)
    return [
        EquivalenceClass(
            qi_values=qi,
            member_nids=frozenset(r.nid for r in members),
            sensitive_values=tuple(r.group for r in members if r.group is not None),
        )
        for qi, members in buckets.items()
    ]


def verify_k_anonymity(rows: list[AnonymizedRow], k: int) -> bool:
    """True iff every equivalence class contains at least ``k`` rows.

    Direct identifiers are absent from :class:`AnonymizedRow` by construction,
    so only the class-size condition needs checking.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    return all(c.size >= k for c in equivalence_classes(rows))


def verify_p_sensitivity(rows: list[AnonymizedRow], p: int) -> bool:
    """True iff every equivalence class has at least ``p`` distinct group labels.

    Raises
    ------
    StateError
        If any row is missing its group label (the check is only meaningful
        after the sensitive attribute has been joined on).
    """
    if p < 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    for row in rows:
        if row.group is None:
            raise StateError(f"row nid={row.nid} has no group label")
    return all(c.distinct_sensitive >= p for c in equivalence_classes(rows))
