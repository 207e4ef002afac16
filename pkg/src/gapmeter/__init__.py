"""Privacy-preserving measurement of acceptance-rate gaps.

Anonymizes per-guest booking aggregates under p-sensitive k-anonymity,
estimates experiment effects on the acceptance rate gap, quantifies the
statistical-power cost of anonymization by simulation, and implements the
encrypted tag-batch exchange with an external tagging partner.
"""

from gapmeter.anonymize import AnonymizeConfig, AnonymizeReport, anonymize_table, k_anonymize
from gapmeter.core import (
    AnonymizedRow,
    ContactRecord,
    EquivalenceClass,
    GuestAggregate,
    equivalence_classes,
    verify_k_anonymity,
    verify_p_sensitivity,
)
from gapmeter.errors import (
    CryptoError,
    GapmeterError,
    InsufficientDataError,
    ParameterError,
    SchemaError,
    SimulationError,
    StateError,
    SuppressionBudgetError,
    ValidationError,
)
from gapmeter.exchange import (
    JoinReport,
    TagBatchRequestEntry,
    TagBatchResultEntry,
    generate_keypair,
    join_results,
    parse_request_file,
    parse_result_file,
    seal,
    unseal,
    write_request_file,
    write_result_file,
)
from gapmeter.sensitize import RiskReport, SensitizeConfig, homogeneity_fraction, p_sensitize
from gapmeter.simulate import (
    GridSummary,
    RunResult,
    SimConfig,
    aggregate_guests,
    expand_contacts,
    generate_contacts,
    run_grid,
    simulate_run,
    simulate_run_plain,
)
from gapmeter.stats import (
    EffectEstimate,
    RunSummary,
    estimate_effect,
    mde,
    power,
    summarize_runs,
)

__version__ = "0.1.0"

__all__ = [
    "AnonymizeConfig",
    "AnonymizeReport",
    "AnonymizedRow",
    "ContactRecord",
    "CryptoError",
    "EffectEstimate",
    "EquivalenceClass",
    "GapmeterError",
    "GridSummary",
    "GuestAggregate",
    "InsufficientDataError",
    "JoinReport",
    "ParameterError",
    "RiskReport",
    "RunResult",
    "RunSummary",
    "SchemaError",
    "SensitizeConfig",
    "SimConfig",
    "SimulationError",
    "StateError",
    "SuppressionBudgetError",
    "TagBatchRequestEntry",
    "TagBatchResultEntry",
    "ValidationError",
    "aggregate_guests",
    "anonymize_table",
    "equivalence_classes",
    "estimate_effect",
    "expand_contacts",
    "generate_contacts",
    "generate_keypair",
    "homogeneity_fraction",
    "join_results",
    "k_anonymize",
    "mde",
    "p_sensitize",
    "parse_request_file",
    "parse_result_file",
    "power",
    "run_grid",
    "seal",
    "simulate_run",
    "simulate_run_plain",
    "summarize_runs",
    "unseal",
    "verify_k_anonymity",
    "verify_p_sensitivity",
    "write_request_file",
    "write_result_file",
]
