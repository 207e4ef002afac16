"""CSV and config-file plumbing shared by the CLI and the report renderer.

Two input schemas are accepted for guest tables: the full per-arm schema

    guest_id, guest_group, n_accept_treat, n_reject_treat, n_accept_ctrl, n_reject_ctrl

and the compact two-column variant

    guest_id, n_accept, n_reject, guest_group

Anonymized output carries only the quasi-identifier columns plus
``guest_group``: never ``guest_id``, never ``nid``.

All writes go through a temp-file-and-rename so a failure never leaves a
truncated output behind. Floats are serialized with ``repr`` so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gapmeter.core import AnonymizedRow
from gapmeter.errors import ParameterError, SchemaError
from gapmeter.simulate import GridSummary, SimConfig

SIM_QI_COLUMNS = ("n_accept_treat", "n_reject_treat", "n_accept_ctrl", "n_reject_ctrl")
WALKTHROUGH_QI_COLUMNS = ("n_accept", "n_reject")

RESULTS_COLUMNS = (
    "k",
    "n",
    "effect_size",
    "power",
    "n_sim_runs",
    "mean_c",
    "bias_pct",
    "sd_c",
    "skew_c",
    "ks_stat",
    "ks_pvalue",
    "homogeneity_fraction",
    "suppressed_fraction",
)


@dataclass(frozen=True)
class GuestTable:
    """Parsed guest-level input: ids, group labels, and the qi matrix."""

    guest_ids: tuple[int, ...]
    groups: tuple[str, ...]
    qi_columns: tuple[str, ...]
    qi: np.ndarray


@contextmanager
def atomic_write(path: str | Path, mode: str = "w") -> Iterator:
    """Write to a sibling temp file and rename into place on success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as handle:
            yield handle
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise


def read_guest_table(path: str | Path) -> GuestTable:
    """Read a guest CSV in either accepted schema."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, no header row")
        header = set(reader.fieldnames)
        if header == {"guest_id", "guest_group", *SIM_QI_COLUMNS}:
            qi_columns = SIM_QI_COLUMNS
        elif header == {"guest_id", "guest_group", *WALKTHROUGH_QI_COLUMNS}:
            qi_columns = WALKTHROUGH_QI_COLUMNS
        else:
            raise SchemaError(
                f"{path}: unrecognized columns {sorted(header)}; expected the "
                f"per-arm schema {SIM_QI_COLUMNS} or the compact schema "
                f"{WALKTHROUGH_QI_COLUMNS}, each with guest_id and guest_group"
            )
        guest_ids: list[int] = []
        groups: list[str] = []
        values: list[list[float]] = []
        for number, record in enumerate(reader, start=2):
            try:
                guest_ids.append(int(record["guest_id"]))
                values.append([float(record[col]) for col in qi_columns])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: line {number}: {exc}") from exc
            groups.append(record["guest_group"])
    if not guest_ids:
        raise SchemaError(f"{path}: no data rows")
    return GuestTable(
        guest_ids=tuple(guest_ids),
        groups=tuple(groups),
        qi_columns=qi_columns,
        qi=np.asarray(values, dtype=np.float64),
    )


def write_anonymized_csv(
    path: str | Path,
    qi_columns: Sequence[str],
    rows: Sequence[AnonymizedRow],
) -> None:
    """Persist the published dataset: qi columns plus guest_group, nothing else."""
    with atomic_write(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*qi_columns, "guest_group"])
        for row in rows:
            if row.group is None:
                raise ParameterError(f"row nid={row.nid} has no group; cannot publish")
            writer.writerow([repr(v) for v in row.qi] + [row.group])


def read_anonymized_csv(path: str | Path) -> tuple[tuple[str, ...], list[AnonymizedRow]]:
    """Read a published dataset back; nids are synthesized (the file has none)."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, no header row")
        qi_columns = tuple(c for c in reader.fieldnames if c != "guest_group")
        has_group = "guest_group" in reader.fieldnames
        if not qi_columns:
            raise SchemaError(f"{path}: no quasi-identifier columns")
        rows: list[AnonymizedRow] = []
        for number, record in enumerate(reader, start=2):
            try:
                qi = tuple(float(record[c]) for c in qi_columns)
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: line {number}: {exc}") from exc
            rows.append(
                AnonymizedRow(
                    nid=number - 2,
                    qi=qi,
                    group=record["guest_group"] if has_group else None,
                )
            )
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return qi_columns, rows


def read_store1_csv(path: str | Path) -> tuple[tuple[str, ...], list[AnonymizedRow]]:
    """Read a nid-bearing intermediate store (nid plus qi columns)."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or "nid" not in reader.fieldnames:
            raise SchemaError(f"{path}: expected a header with a nid column")
        qi_columns = tuple(c for c in reader.fieldnames if c != "nid")
        if not qi_columns:
            raise SchemaError(f"{path}: no quasi-identifier columns")
        rows: list[AnonymizedRow] = []
        for number, record in enumerate(reader, start=2):
            try:
                rows.append(
                    AnonymizedRow(
                        nid=int(record["nid"]),
                        qi=tuple(float(record[c]) for c in qi_columns),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: line {number}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return qi_columns, rows


def read_tag_request_csv(path: str | Path) -> list[tuple[str, str, str]]:
    """Read (nid, photo_url, first_name) triples for building a tag batch."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        expected = {"nid", "photo_url", "first_name"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise SchemaError(f"{path}: expected exactly the columns {sorted(expected)}")
        triples = [(r["nid"], r["photo_url"], r["first_name"]) for r in reader]
    if not triples:
        raise SchemaError(f"{path}: no data rows")
    return triples


def _as_list(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


_GRID_KEYS = {
    "seed",
    "n_runs",
    "p",
    "k",
    "n_contacts",
    "effect_size_pp",
    "base_accept",
    "contacts_per_guest_mean",
    "max_suppression_fraction",
}


def load_grid_config(path: str | Path) -> list[SimConfig]:
    """Expand a JSON or TOML grid spec into one SimConfig per (k, N, effect) cell.

    ``k``, ``n_contacts``, and ``effect_size_pp`` may be scalars or lists;
    their product, iterated k-outermost, defines the cell order. All cells
    share the same seed so runs are matched across k.
    """
    raw = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib

        spec = tomllib.loads(raw.decode("utf-8"))
    else:
        spec = json.loads(raw)
    unknown = set(spec) - _GRID_KEYS
    if unknown:
        raise ParameterError(f"unknown grid config keys: {sorted(unknown)}")
    for key in ("seed", "n_runs", "k", "n_contacts", "effect_size_pp"):
        if key not in spec:
            raise ParameterError(f"grid config is missing required key {key!r}")
    common = {
        "p": spec.get("p", 2),
        "n_runs": spec["n_runs"],
        "seed": spec["seed"],
        "contacts_per_guest_mean": spec.get("contacts_per_guest_mean", 2.0),
        "max_suppression_fraction": spec.get("max_suppression_fraction", 0.02),
    }
    if "base_accept" in spec:
        common["base_accept"] = dict(spec["base_accept"])
    cells = [
        SimConfig(n_contacts=int(n), k=int(k), effect_size_pp=float(effect), **common)
        for k in _as_list(spec["k"])
        for n in _as_list(spec["n_contacts"])
        for effect in _as_list(spec["effect_size_pp"])
    ]
    if not cells:
        raise ParameterError("grid config expands to zero cells")
    return cells


def results_row(summary: GridSummary) -> list[str]:
    """Flatten one grid summary into the results-CSV column order."""
    k, n, effect = summary.key
    rs = summary.run_summary
    return [
        str(k),
        str(n),
        repr(effect),
        repr(summary.power),
        str(rs.n_sim_runs),
        repr(rs.mean_c),
        repr(rs.bias_pct),
        repr(rs.sd_c),
        repr(rs.skew_c),
        repr(rs.ks_stat),
        repr(rs.ks_pvalue),
        repr(summary.mean_homogeneity_fraction),
        repr(summary.mean_suppressed_fraction),
    ]


def write_results_csv(path: str | Path, summaries: Sequence[GridSummary]) -> None:
    with atomic_write(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RESULTS_COLUMNS)
        for summary in summaries:
            writer.writerow(results_row(summary))


def read_results_csv(path: str | Path) -> list[dict[str, float]]:
    """Read a results CSV into per-cell dicts with numeric values."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or set(RESULTS_COLUMNS) - set(reader.fieldnames):
            raise SchemaError(f"{path}: expected results columns {RESULTS_COLUMNS}")
        out = []
        for record in reader:
            cell = {key: float(record[key]) for key in RESULTS_COLUMNS}
            cell["k"] = int(record["k"])
            cell["n"] = int(record["n"])
            cell["n_sim_runs"] = int(record["n_sim_runs"])
            out.append(cell)
    if not out:
        raise SchemaError(f"{path}: no data rows")
    return out


def write_json(path: str | Path, payload: dict) -> None:
    with atomic_write(path) as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
