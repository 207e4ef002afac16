"""K-anonymization: suppression, multidimensional partitioning, microaggregation.

The transformation runs in three stages:

1. **Suppression** removes whole outlier rows (never single attribute values).
   A row is a candidate when any attribute exceeds ``Q3 + 3*IQR`` for that
   attribute; attributes with zero IQR carry no spread information and are
   skipped. Candidates are suppressed largest-deviation-first, and flagging
   more candidates than the configured budget allows is an error rather than
   a silent partial suppression.

2. **Generalization** partitions the surviving rows top-down: recursively
   split on the attribute with the widest normalized range at its median
   (left side ``<= median``, right side ``> median``), rejecting any split
   that would leave a side with fewer than ``k`` rows. Normalization uses
   the per-attribute span of the post-suppression dataset. Attribute order
   breaks ties, so the partition is deterministic.

3. **Microaggregation** replaces each partition member's quasi-identifiers
   with the partition's arithmetic mean, component-wise. Every member of a
   class therefore carries bit-identical qi values, and both per-class and
   grand means are preserved.

``k == 1`` imposes no constraint, so the transform special-cases to the
identity on qi values: no suppression, no generalization, fresh nids only.

The guest identifier is dropped irreversibly: outputs carry only a fresh
pseudo-random 64-bit ``nid`` (unique per run, regenerated on collision), and
the sensitive group label travels in a separate sidecar keyed by nid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gapmeter.core import AnonymizedRow, GuestAggregate
from gapmeter.errors import (
    InsufficientDataError,
    ParameterError,
    SuppressionBudgetError,
)

_UINT64_MAX = 2**64 - 1


@dataclass(frozen=True)
class AnonymizeConfig:
    k: int
    max_suppression_fraction: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.max_suppression_fraction <= 1.0:
            raise ParameterError(
                "max_suppression_fraction must be in [0, 1], "
                f"got {self.max_suppression_fraction}"
            )
        if not 0 <= self.seed <= _UINT64_MAX:
            raise ParameterError(f"seed must fit in 64 bits, got {self.seed}")


@dataclass(frozen=True)
class AnonymizeReport:
    """Observability for one anonymization run.

    ``information_loss`` is the mean absolute deviation of qi values from
    their class means, averaged over all surviving rows and attributes.
    ``suppressed_indices`` are positions into the *input* sequence; they let
    the caller (who still holds the originals) audit exactly what was dropped.
    """

    n_input: int
    n_suppressed: int
    n_classes: int
    min_class_size: int
    information_loss: float
    suppressed_indices: tuple[int, ...] = ()


def _outlier_candidates(qi: np.ndarray) -> list[int]:
    """Row indices whose any attribute exceeds Q3 + 3*IQR, worst first.

    Deviation is measured in IQR units beyond the threshold; ties fall back
    to row order so the result is deterministic.
    """
    q1 = np.quantile(qi, 0.25, axis=0)
    q3 = np.quantile(qi, 0.75, axis=0)
    iqr = q3 - q1
    active = iqr > 0
    if not active.any():
        return []
    threshold = q3[active] + 3.0 * iqr[active]
    deviation = (qi[:, active] - threshold) / iqr[active]
    row_deviation = deviation.max(axis=1)
    flagged = np.flatnonzero(row_deviation > 0)
    order = np.lexsort((flagged, -row_deviation[flagged]))
    return [int(i) for i in flagged[order]]


def _partition_class_ids(qi: np.ndarray, weights: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Assign a partition id to every distinct qi vector via top-down median splits.

    Operates on unique vectors with row multiplicities: identical rows can
    never be separated by a value split, so collapsing them first changes
    nothing about the result while shrinking the recursion by orders of
    magnitude on count data. Split decisions use the row-weighted median,
    which equals the median over the expanded rows exactly.
    """
    n = qi.shape[0]
    spans = qi.max(axis=0) - qi.min(axis=0)
    safe_spans = np.where(spans > 0, spans, 1.0)
    class_id = np.empty(n, dtype=np.int64)
    next_id = 0
    stack: list[tuple[np.ndarray, int]] = [(np.arange(n), int(weights.sum()))]
    while stack:
        idx, total = stack.pop()
        cut = _find_cut(qi, weights, idx, total, k, spans, safe_spans)
        if cut is None:
            class_id[idx] = next_id
            next_id += 1
        else:
            stack.append(cut[0])
            stack.append(cut[1])
    return class_id, next_id


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Median over rows expanded by weight, plus the cumulative row counts.

    Matches ``np.median`` on the expanded array: the midpoint average of the
    two middle rows for even totals, the middle row otherwise.
    """
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    total = int(cum[-1])
    lo = values[order[np.searchsorted(cum, (total - 1) // 2 + 1)]]
    hi = values[order[np.searchsorted(cum, total // 2 + 1)]]
    return (lo + hi) * 0.5, cum


def _find_cut(
    qi: np.ndarray,
    weights: np.ndarray,
    idx: np.ndarray,
    total: int,
    k: int,
    spans: np.ndarray,
    safe_spans: np.ndarray,
) -> tuple[tuple[np.ndarray, int], tuple[np.ndarray, int]] | None:
    if total < 2 * k:
        return None
    sub = qi[idx]
    sub_weights = weights[idx]
    widths = sub.max(axis=0) - sub.min(axis=0)
    normalized = np.where(spans > 0, widths / safe_spans, 0.0)
    for j in np.argsort(-normalized, kind="stable"):
        if widths[j] == 0:
            # All values equal: nothing strictly larger to split off.
            continue
        median, _ = _weighted_median(sub[:, j], sub_weights)
        left_mask = sub[:, j] <= median
        n_left = int(sub_weights[left_mask].sum())
        if n_left >= k and total - n_left >= k:
            return (idx[left_mask], n_left), (idx[~left_mask], total - n_left)
    return None


def _group_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group identical rows: (distinct vectors, row -> vector index, multiplicities).

    Small non-negative integer matrices (the usual contact counts) are packed
    into one int64 key per row, which groups an order of magnitude faster
    than lexicographic comparison of float rows; anything else falls back to
    ``np.unique(axis=0)``. Only the grouping differs, never its content.
    """
    maxima = matrix.max(axis=0)
    if np.all(matrix == np.floor(matrix)) and np.prod(maxima + 1.0) < 2**62:
        key = np.zeros(matrix.shape[0], dtype=np.int64)
        stride = 1
        for j in range(matrix.shape[1]):
            key += matrix[:, j].astype(np.int64) * stride
            stride *= int(maxima[j]) + 1
        _, first, inverse, counts = np.unique(
            key, return_index=True, return_inverse=True, return_counts=True
        )
        return matrix[first], inverse.ravel(), counts
    vectors, inverse, counts = np.unique(
        matrix, axis=0, return_inverse=True, return_counts=True
    )
    return vectors, inverse.ravel(), counts


def _generate_nids(count: int, seed: int) -> np.ndarray:
    """Pseudo-random 64-bit identifiers, unique within the run."""
    rng = np.random.default_rng(seed)
    nids = rng.integers(0, _UINT64_MAX, size=count, dtype=np.uint64, endpoint=True)
    while True:
        _, first_pos, counts = np.unique(nids, return_index=True, return_counts=True)
        if (counts == 1).all():
            return nids
        dup_mask = np.ones(count, dtype=bool)
        dup_mask[first_pos] = False
        nids[dup_mask] = rng.integers(
            0, _UINT64_MAX, size=int(dup_mask.sum()), dtype=np.uint64, endpoint=True
        )


def anonymize_counts(
    qi: np.ndarray,
    cfg: AnonymizeConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, AnonymizeReport]:
    """Array-level engine: suppress, partition, and microaggregate a qi matrix.

    Returns the microaggregated matrix (rows in input order, suppressed rows
    removed), the input indices of the surviving rows, the partition id per
    surviving row, and the report. This is the single implementation behind
    :func:`anonymize_table`; the grid runner calls it directly to stay in
    array land.
    """
    matrix = np.asarray(qi, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ParameterError("qi must be a non-empty 2-d matrix")
    if np.any(matrix < 0) or not np.all(np.isfinite(matrix)):
        raise ParameterError("qi values must be finite and >= 0")

    n_input = matrix.shape[0]
    if cfg.k == 1:
        # k = 1 imposes no constraint: identity on qi, nothing suppressed.
        keep = np.arange(n_input)
        suppressed: list[int] = []
        kept = matrix
        class_id = np.arange(n_input, dtype=np.int64)
        n_parts = n_input
        sizes = np.ones(n_parts, dtype=np.int64)
        qi_out = kept.copy()
    else:
        budget = math.floor(cfg.max_suppression_fraction * n_input)
        candidates = _outlier_candidates(matrix)
        if len(candidates) > budget:
            listing = [(i, tuple(float(v) for v in matrix[i])) for i in candidates]
            raise SuppressionBudgetError(
                f"{len(candidates)} outlier rows flagged but the suppression "
                f"budget allows only {budget}: {listing}",
                listing,
            )
        suppressed = sorted(candidates)
        keep = np.setdiff1d(np.arange(n_input), suppressed, assume_unique=True)
        kept = matrix[keep]
        if kept.shape[0] < cfg.k:
            raise InsufficientDataError(
                f"insufficient data for k: {kept.shape[0]} rows remain after "
                f"suppression but k={cfg.k}"
            )
        vectors, inverse, multiplicity = _group_rows(kept)
        vector_class, n_parts = _partition_class_ids(vectors, multiplicity, cfg.k)
        sums = np.stack(
            [
                np.bincount(vector_class, weights=vectors[:, j] * multiplicity,
                            minlength=n_parts)
                for j in range(vectors.shape[1])
            ],
            axis=1,
        )
        sizes = np.bincount(vector_class, weights=multiplicity, minlength=n_parts).astype(
            np.int64
        )
        means = sums / sizes[:, None]
        class_id = vector_class[inverse]
        qi_out = means[class_id]

    report = AnonymizeReport(
        n_input=n_input,
        n_suppressed=len(suppressed),
        n_classes=int(n_parts),
        min_class_size=int(sizes.min()),
        information_loss=float(np.mean(np.abs(kept - qi_out))),
        suppressed_indices=tuple(suppressed),
    )
    return qi_out, keep, class_id, report


def anonymize_table(
    qi: np.ndarray | Sequence[Sequence[float]],
    groups: Sequence[str] | None,
    cfg: AnonymizeConfig,
) -> tuple[list[AnonymizedRow], AnonymizeReport, list[tuple[int, str]]]:
    """Anonymize a plain quasi-identifier matrix of any arity.

    Returns the anonymized rows (input order, minus suppressed rows), a
    report, and the group sidecar: (nid, group) pairs for the surviving rows
    when ``groups`` is given, empty otherwise. Output rows never carry the
    group themselves; the sidecar stands in for the external tagging path.
    """
    matrix = np.asarray(qi, dtype=np.float64)
    if groups is not None and matrix.ndim == 2 and len(groups) != matrix.shape[0]:
        raise ParameterError("groups length must match the number of rows")
    qi_out, keep, _, report = anonymize_counts(matrix, cfg)

    nids = _generate_nids(len(keep), cfg.seed)
    rows = [
        AnonymizedRow(nid=int(nids[i]), qi=tuple(float(v) for v in qi_out[i]))
        for i in range(len(keep))
    ]
    sidecar = (
        [(int(nids[i]), groups[keep[i]]) for i in range(len(keep))]
        if groups is not None
        else []
    )
    return rows, report, sidecar


def k_anonymize(
    aggregates: Sequence[GuestAggregate],
    cfg: AnonymizeConfig,
) -> tuple[list[AnonymizedRow], AnonymizeReport, list[tuple[int, str]]]:
    """Anonymize per-guest aggregates; the guest_id -> nid mapping is never emitted."""
    if not aggregates:
        raise ParameterError("aggregates must be non-empty")
    qi = np.array([a.qi for a in aggregates], dtype=np.float64)
    groups = [a.guest_group for a in aggregates]
    return anonymize_table(qi, groups, cfg)
