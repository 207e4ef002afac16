"""P-sensitization: perturb sensitive labels until every class has p distinct values.

Perturbation changes only the group label of uniformly chosen member rows,
drawing the new label uniformly from the labels *absent* from the class, so
each step can only add diversity. Quasi-identifiers, nids, and row order are
untouched. Classes smaller than ``p`` (possible only when ``k < p``) cannot
reach ``p`` distinct values and are suppressed instead.

Risk metrics: the homogeneity fraction is recorded on the *pre-perturbation*
state, because a homogeneity attack targets datasets on which this process
was never run; the worst-case linkage probability of the published dataset
is ``1 / (smallest class size)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gapmeter.core import GROUPS, AnonymizedRow, equivalence_classes
from gapmeter.errors import ParameterError, StateError

_UINT64_MAX = 2**64 - 1


@dataclass(frozen=True)
class SensitizeConfig:
    p: int = 2
    seed: int = 0
    #: Alphabet that perturbed labels are drawn from; p can never exceed its size.
    labels: tuple[str, ...] = GROUPS

    def __post_init__(self) -> None:
        if self.p < 1:
            raise ParameterError(f"p must be >= 1, got {self.p}")
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise ParameterError(f"labels must be non-empty and unique, got {self.labels}")
        if self.p > len(self.labels):
            raise ParameterError(
                f"p={self.p} exceeds the label alphabet size {len(self.labels)}"
            )
        if not 0 <= self.seed <= _UINT64_MAX:
            raise ParameterError(f"seed must fit in 64 bits, got {self.seed}")


@dataclass(frozen=True)
class RiskReport:
    homogeneity_fraction: float
    max_linkage_prob: float
    n_perturbed: int
    n_suppressed: int = 0


def _class_members(inverse: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row positions grouped by class id: (ordering, class start offsets)."""
    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(n_classes + 1))
    return order, starts


def sensitize_codes(
    qi: np.ndarray,
    codes: np.ndarray,
    n_labels: int,
    p: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Array-level engine behind :func:`p_sensitize`.

    Groups are integer codes in ``[0, n_labels)``. Returns the perturbed
    codes, the keep mask (False for rows of classes smaller than p), the
    number of perturbations, and the pre-perturbation homogeneity fraction.
    """
    _, inverse = np.unique(qi, axis=0, return_inverse=True)
    return sensitize_inverse(inverse.ravel(), codes, n_labels, p, seed)


def sensitize_inverse(
    inverse: np.ndarray,
    codes: np.ndarray,
    n_labels: int,
    p: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Same as :func:`sensitize_codes` with the qi-equality classes precomputed
    (``inverse`` maps each row to its class id)."""
    n = len(inverse)
    n_classes = int(inverse.max()) + 1
    sizes = np.bincount(inverse, minlength=n_classes)
    pair_ids = np.unique(inverse.astype(np.int64) * n_labels + codes)
    distinct = np.bincount(pair_ids // n_labels, minlength=n_classes)

    homogeneity = float(sizes[distinct == 1].sum() / n)
    keep_mask = sizes[inverse] >= p

    out = codes.copy()
    n_perturbed = 0
    violating = np.flatnonzero((distinct < p) & (sizes >= p))
    if violating.size:
        rng = np.random.default_rng(seed)
        order, starts = _class_members(inverse, n_classes)
        for c in violating:
            members = order[starts[c] : starts[c + 1]]
            label_counts = np.bincount(out[members], minlength=n_labels)
            n_distinct = int((label_counts > 0).sum())
            while n_distinct < p:
                pos = members[rng.integers(len(members))]
                missing = np.flatnonzero(label_counts == 0)
                new = int(missing[rng.integers(len(missing))])
                old = int(out[pos])
                label_counts[old] -= 1
                label_counts[new] += 1
                # Gains one label; loses one only if pos held the last copy of old.
                n_distinct += 1 - (label_counts[old] == 0)
                out[pos] = new
                n_perturbed += 1
    return out, keep_mask, n_perturbed, homogeneity


def p_sensitize(
    rows: list[AnonymizedRow],
    cfg: SensitizeConfig,
) -> tuple[list[AnonymizedRow], RiskReport]:
    """Perturb group labels until every class of size >= p has p distinct values.

    Rows must be k-anonymous and carry a group from ``cfg.labels``. Returns
    the surviving rows in input order and a :class:`RiskReport`.
    """
    if not rows:
        raise ParameterError("rows must be non-empty")
    label_index = {label: i for i, label in enumerate(cfg.labels)}
    codes = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        if row.group is None:
            raise StateError(f"row nid={row.nid} has no group label")
        if row.group not in label_index:
            raise StateError(
                f"row nid={row.nid} carries group {row.group!r} outside the "
                f"alphabet {cfg.labels}"
            )
        codes[i] = label_index[row.group]
    qi = np.asarray([row.qi for row in rows], dtype=np.float64)

    out_codes, keep_mask, n_perturbed, homogeneity = sensitize_codes(
        qi, codes, len(cfg.labels), cfg.p, cfg.seed
    )
    if not keep_mask.any():
        raise StateError(f"every equivalence class is smaller than p={cfg.p}")

    kept_rows = [
        rows[i] if out_codes[i] == codes[i] else rows[i].with_group(cfg.labels[out_codes[i]])
        for i in np.flatnonzero(keep_mask)
    ]
    min_size = min(c.size for c in equivalence_classes(kept_rows))
    report = RiskReport(
        homogeneity_fraction=homogeneity,
        max_linkage_prob=1.0 / min_size,
        n_perturbed=n_perturbed,
        n_suppressed=int(len(rows) - keep_mask.sum()),
    )
    return kept_rows, report


def homogeneity_fraction(rows: list[AnonymizedRow]) -> float:
    """Fraction of rows whose equivalence class has exactly one distinct group."""
    if not rows:
        raise ParameterError("rows must be non-empty")
    for row in rows:
        if row.group is None:
            raise StateError(f"row nid={row.nid} has no group label")
    classes = equivalence_classes(rows)
    homogeneous = sum(c.size for c in classes if c.distinct_sensitive == 1)
    return homogeneous / len(rows)
