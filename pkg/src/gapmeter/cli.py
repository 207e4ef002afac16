"""Command-line surface for the anonymization and measurement pipeline.

Subcommands: anonymize, check, simulate, risk, report, and the tagbatch
family (keygen, make-request, simulate-partner, merge-results).

Exit codes: 0 ok, 2 schema/parameter problems, 3 privacy-verification
failure (including too little data for k), 4 crypto failure, 5 validation
failure (partner-file validation, suppression budget). No subcommand ever
writes guest_id or the nid-to-guest mapping to any output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from gapmeter import io
from gapmeter.anonymize import AnonymizeConfig, anonymize_table
from gapmeter.core import equivalence_classes, verify_k_anonymity, verify_p_sensitivity
from gapmeter.errors import (
    CryptoError,
    GapmeterError,
    InsufficientDataError,
    ParameterError,
    SchemaError,
    StateError,
    SuppressionBudgetError,
    ValidationError,
)
from gapmeter import exchange
from gapmeter.report import render_report
from gapmeter.sensitize import SensitizeConfig, homogeneity_fraction, p_sensitize
from gapmeter.simulate import run_grid

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_PRIVACY = 3
EXIT_CRYPTO = 4
EXIT_VALIDATION = 5

#: Recommended production floor for k; lower values only warn because
#: calibration studies legitimately sweep k down to 1.
POLICY_MIN_K = 5

#: Default tag alphabet for the partner exchange fixtures.
DEFAULT_ALLOWED_TAGS = "white,black,other"


def _warn(message: str) -> None:
    print(f"gapmeter: warning: {message}", file=sys.stderr)


def _fail(message: str, code: int) -> int:
    print(f"gapmeter: error: {message}", file=sys.stderr)
    return code


def _split_tags(raw: str) -> tuple[str, ...]:
    tags = tuple(t.strip() for t in raw.split(",") if t.strip())
    if not tags:
        raise ParameterError(f"--allowed-tags must list at least one label, got {raw!r}")
    return tags


def _check_k_policy(k: int) -> None:
    if k < POLICY_MIN_K:
        _warn(f"k={k} is below the recommended policy floor of {POLICY_MIN_K}")


def cmd_anonymize(args: argparse.Namespace) -> int:
    _check_k_policy(args.k)
    table = io.read_guest_table(args.input)
    rows, areport, sidecar = anonymize_table(
        table.qi,
        list(table.groups),
        AnonymizeConfig(k=args.k, max_suppression_fraction=args.max_suppression, seed=args.seed),
    )
    joined = [row.with_group(group) for row, (_, group) in zip(rows, sidecar)]
    labels = _split_tags(args.allowed_tags)
    final, risk = p_sensitize(joined, SensitizeConfig(p=args.p, seed=args.seed, labels=labels))
    if not (verify_k_anonymity(final, args.k) and verify_p_sensitivity(final, args.p)):
        return _fail("output failed privacy verification", EXIT_PRIVACY)
    io.write_anonymized_csv(args.out, table.qi_columns, final)
    io.write_json(
        args.report,
        {
            "k": args.k,
            "p": args.p,
            "anonymize": dataclasses.asdict(areport),
            "risk": dataclasses.asdict(risk),
        },
    )
    print(f"wrote {len(final)} rows to {args.out} (report: {args.report})")
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    columns, rows = io.read_anonymized_csv(args.input)
    k_ok = verify_k_anonymity(rows, args.k)
    result = {"k": args.k, "k_anonymous": k_ok, "qi_columns": list(columns)}
    ok = k_ok
    if args.p is not None:
        if any(r.group is None for r in rows):
            return _fail("p-sensitivity check needs a guest_group column", EXIT_SCHEMA)
        p_ok = verify_p_sensitivity(rows, args.p)
        result.update({"p": args.p, "p_sensitive": p_ok})
        ok = ok and p_ok
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK if ok else EXIT_PRIVACY


def cmd_simulate(args: argparse.Namespace) -> int:
    grid = io.load_grid_config(args.grid)
    low_ks = sorted({cfg.k for cfg in grid if cfg.k < POLICY_MIN_K})
    if low_ks:
        _warn(
            f"grid sweeps k={low_ks}, below the recommended policy floor of {POLICY_MIN_K}"
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # Completed cells are flushed as they finish so long grids are resumable
    # by inspection; every written line is a complete row.
    with open(out, "w", newline="", encoding="utf-8") as handle:
        handle.write(",".join(io.RESULTS_COLUMNS) + "\n")
        handle.flush()

        def flush_cell(index: int, summary) -> None:
            handle.write(",".join(io.results_row(summary)) + "\n")
            handle.flush()
            k, n, effect = summary.key
            print(
                f"cell {index + 1}/{len(grid)}: k={k} n={n} effect={effect} "
                f"power={summary.power:.3f}",
                file=sys.stderr,
            )

        run_grid(grid, jobs=args.jobs, on_cell=flush_cell)
    print(f"wrote {len(grid)} cells to {out}")
    return EXIT_OK


def cmd_risk(args: argparse.Namespace) -> int:
    _, rows = io.read_anonymized_csv(args.input)
    if any(r.group is None for r in rows):
        return _fail("risk report needs a guest_group column", EXIT_SCHEMA)
    classes = equivalence_classes(rows)
    sizes = sorted(c.size for c in classes)
    payload = {
        "n_rows": len(rows),
        "n_classes": len(classes),
        "min_class_size": sizes[0],
        "max_class_size": sizes[-1],
        "max_linkage_prob": 1.0 / sizes[0],
        "homogeneity_fraction": homogeneity_fraction(rows),
    }
    if args.out:
        io.write_json(args.out, payload)
        print(f"wrote risk report to {args.out}")
    else:
        print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_tagbatch_keygen(args: argparse.Namespace) -> int:
    private_pem, public_pem = exchange.generate_keypair()
    private_path = Path(args.private)
    with io.atomic_write(private_path, "wb") as handle:
        handle.write(private_pem)
    private_path.chmod(0o600)
    with io.atomic_write(args.public, "wb") as handle:
        handle.write(public_pem)
    io.write_json(str(private_path) + ".meta.json", exchange.keypair_metadata())
    print(f"wrote keypair: {args.private} (private), {args.public} (public)")
    return EXIT_OK


def cmd_tagbatch_make_request(args: argparse.Namespace) -> int:
    triples = io.read_tag_request_csv(args.input)
    entries = [
        exchange.TagBatchRequestEntry(nid=n, photo_url=u, first_name=f)
        for n, u, f in triples
    ]
    sealed = exchange.seal(
        exchange.write_request_file(entries), Path(args.recipient_public).read_bytes()
    )
    with io.atomic_write(args.out, "wb") as handle:
        handle.write(sealed)
    print(f"sealed request with {len(entries)} entries to {args.out}")
    return EXIT_OK


def cmd_tagbatch_simulate_partner(args: argparse.Namespace) -> int:
    plaintext = exchange.unseal(Path(args.request).read_bytes(), Path(args.private).read_bytes())
    entries = exchange.parse_request_file(plaintext)
    tags = _split_tags(args.allowed_tags)
    rng = np.random.default_rng(args.seed)
    tagger_pool = [f"T{i:02d}" for i in range(1, 6)]
    results = [
        exchange.TagBatchResultEntry(
            nid=e.nid,
            tid=tagger_pool[rng.integers(len(tagger_pool))],
            tag=tags[rng.integers(len(tags))],
            num_people=1,
        )
        for e in entries
    ]
    sealed = exchange.seal(
        exchange.write_result_file(results), Path(args.recipient_public).read_bytes()
    )
    with io.atomic_write(args.out, "wb") as handle:
        handle.write(sealed)
    print(f"sealed synthetic results for {len(results)} entries to {args.out}")
    return EXIT_OK


def cmd_tagbatch_merge_results(args: argparse.Namespace) -> int:
    qi_columns, store_rows = io.read_store1_csv(args.store)
    plaintext = exchange.unseal(Path(args.results).read_bytes(), Path(args.private).read_bytes())
    tags = _split_tags(args.allowed_tags)
    results = exchange.parse_result_file(
        plaintext, [str(r.nid) for r in store_rows], tags
    )
    joined, join_report = exchange.join_results(results, store_rows)
    if join_report.n_dropped:
        _warn(f"{join_report.n_dropped} store rows had no tagging result and were dropped")
    if join_report.n_ignored:
        _warn(f"{join_report.n_ignored} results matched no store row and were ignored")
    final, risk = p_sensitize(
        joined, SensitizeConfig(p=args.p, seed=args.seed, labels=tags)
    )
    io.write_anonymized_csv(args.out, qi_columns, final)
    io.write_json(
        args.report,
        {"p": args.p, "join": dataclasses.asdict(join_report), "risk": dataclasses.asdict(risk)},
    )
    print(f"merged {join_report.n_joined} rows; wrote {len(final)} rows to {args.out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    written = render_report(args.results, args.out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapmeter",
        description="Anonymize booking aggregates, verify privacy properties, "
        "simulate the power cost of anonymization, and run the tag-batch exchange.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_anon = sub.add_parser("anonymize", help="k-anonymize and p-sensitize a guest table")
    p_anon.add_argument("input", help="guest CSV (per-arm or compact schema)")
    p_anon.add_argument("--k", type=_positive_int, required=True)
    p_anon.add_argument("--p", type=_positive_int, default=2)
    p_anon.add_argument("--seed", type=int, default=0)
    p_anon.add_argument("--max-suppression", type=float, default=0.02)
    p_anon.add_argument("--allowed-tags", default="A,B,C",
                        help="group alphabet for perturbation (comma-separated)")
    p_anon.add_argument("--out", required=True, help="output CSV (no identifiers)")
    p_anon.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p_anon.set_defaults(func=cmd_anonymize)

    p_check = sub.add_parser("check", help="verify k-anonymity / p-sensitivity of a CSV")
    p_check.add_argument("input")
    p_check.add_argument("--k", type=_positive_int, required=True)
    p_check.add_argument("--p", type=_positive_int)
    p_check.set_defaults(func=cmd_check)

    p_sim = sub.add_parser("simulate", help="run a simulation grid to a results CSV")
    p_sim.add_argument("--grid", required=True, help="grid config (JSON or TOML)")
    p_sim.add_argument("--out", required=True, help="results CSV path")
    p_sim.add_argument("--jobs", type=_positive_int, default=1)
    p_sim.set_defaults(func=cmd_simulate)

    p_risk = sub.add_parser("risk", help="disclosure-risk report for an anonymized CSV")
    p_risk.add_argument("input")
    p_risk.add_argument("--out", help="write JSON here instead of stdout")
    p_risk.set_defaults(func=cmd_risk)

    p_rep = sub.add_parser("report", help="render figures and mde.csv from results")
    p_rep.add_argument("--results", required=True)
    p_rep.add_argument("--out-dir", required=True)
    p_rep.set_defaults(func=cmd_report)

    p_tb = sub.add_parser("tagbatch", help="tag-batch exchange with the research partner")
    tb_sub = p_tb.add_subparsers(dest="tagbatch_command", required=True)

    t_key = tb_sub.add_parser("keygen", help="generate an RSA keypair with expiry metadata")
    t_key.add_argument("--private", required=True)
    t_key.add_argument("--public", required=True)
    t_key.set_defaults(func=cmd_tagbatch_keygen)

    t_req = tb_sub.add_parser("make-request", help="seal a tag batch request file")
    t_req.add_argument("input", help="CSV with nid, photo_url, first_name")
    t_req.add_argument("--recipient-public", required=True, help="partner public key PEM")
    t_req.add_argument("--out", required=True)
    t_req.set_defaults(func=cmd_tagbatch_make_request)

    t_part = tb_sub.add_parser(
        "simulate-partner", help="open a request and emit synthetic sealed results"
    )
    t_part.add_argument("--request", required=True)
    t_part.add_argument("--private", required=True, help="partner private key PEM")
    t_part.add_argument("--recipient-public", required=True, help="our public key PEM")
    t_part.add_argument("--allowed-tags", default=DEFAULT_ALLOWED_TAGS)
    t_part.add_argument("--seed", type=int, default=0)
    t_part.add_argument("--out", required=True)
    t_part.set_defaults(func=cmd_tagbatch_simulate_partner)

    t_merge = tb_sub.add_parser(
        "merge-results", help="open, validate, join, and p-sensitize tagging results"
    )
    t_merge.add_argument("--results", required=True, help="sealed results file")
    t_merge.add_argument("--private", required=True, help="our private key PEM")
    t_merge.add_argument("--store", required=True, help="nid-bearing store CSV")
    t_merge.add_argument("--allowed-tags", default=DEFAULT_ALLOWED_TAGS)
    t_merge.add_argument("--p", type=_positive_int, default=2)
    t_merge.add_argument("--seed", type=int, default=0)
    t_merge.add_argument("--out", required=True)
    t_merge.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    t_merge.set_defaults(func=cmd_tagbatch_merge_results)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "report", None) is None and hasattr(args, "report"):
        args.report = str(args.out) + ".report.json"
    try:
        return args.func(args)
    except SchemaError as exc:
        return _fail(str(exc), EXIT_SCHEMA)
    except (SuppressionBudgetError, ValidationError) as exc:
        return _fail(str(exc), EXIT_VALIDATION)
    except InsufficientDataError as exc:
        return _fail(str(exc), EXIT_PRIVACY)
    except CryptoError as exc:
        return _fail(str(exc), EXIT_CRYPTO)
    except (ParameterError, StateError) as exc:
        return _fail(str(exc), EXIT_SCHEMA)
    except GapmeterError as exc:
        return _fail(str(exc), 1)
    except OSError as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
