"""Statistical kernel: interaction-term OLS, power, MDE, and run diagnostics.

The experiment effect on the acceptance rate gap is the interaction
coefficient of a saturated linear-probability model

    accepted ~ intercept + treatment + group_b + treatment * group_b

restricted to guest groups A and B. On this design the interaction
coefficient equals the difference-in-differences of the four cell means,
which the test suite exploits as an independent oracle. Standard errors are
classical (homoskedastic) with a two-sided t-test at alpha = 0.05.

Run diagnostics (sample skewness, one-sample Kolmogorov-Smirnov against a
normal fitted to the same sample) are implemented directly here; the test
suite cross-checks them against frozen reference values from an external
statistics stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import t as t_dist

from gapmeter.core import ARM_TREATMENT, ContactRecord
from gapmeter.errors import ParameterError

ALPHA = 0.05
POWER_TARGET = 0.80


@dataclass(frozen=True)
class EffectEstimate:
    """Regression output for one experiment, in percentage points."""

    c: float
    se_c: float
    p_value: float
    significant: bool
    n_obs: int


@dataclass(frozen=True)
class RunSummary:
    """Distributional summary of observed effects across simulation runs."""

    n_sim_runs: int
    mean_c: float
    bias_pct: float
    sd_c: float
    skew_c: float
    ks_stat: float
    ks_pvalue: float


def estimate_effect_arrays(
    is_group_b: np.ndarray,
    is_treatment: np.ndarray,
    accepted: np.ndarray,
) -> EffectEstimate:
    """OLS fit of the saturated interaction model on already-encoded arrays."""
    n = len(accepted)
    cells = np.bincount(is_group_b.astype(np.int64) * 2 + is_treatment, minlength=4)
    if (cells == 0).any():
        raise ParameterError(
            "singular design: every (group, arm) cell needs at least one contact, "
            f"got cell counts {cells.tolist()}"
        )
    if n - 4 < 1:
        raise ParameterError(f"need more than 4 observations, got {n}")

    x = np.column_stack(
        [
            np.ones(n),
            is_treatment.astype(np.float64),
            is_group_b.astype(np.float64),
            (is_treatment & is_group_b).astype(np.float64),
        ]
    )
    y = accepted.astype(np.float64)
    xtx = x.T @ x
    beta = np.linalg.solve(xtx, x.T @ y)
    resid = y - x @ beta
    dof = n - 4
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(xtx)
    se = math.sqrt(max(cov[3, 3], 0.0))

    if se > 0:
        p_value = 2.0 * float(t_dist.sf(abs(beta[3]) / se, dof))
    else:
        p_value = 0.0 if beta[3] != 0 else 1.0
    return EffectEstimate(
        c=float(beta[3]) * 100.0,
        se_c=se * 100.0,
        p_value=p_value,
        significant=p_value < ALPHA,
        n_obs=n,
    )


def estimate_effect(contacts: Sequence[ContactRecord]) -> EffectEstimate:
    """Estimate the experiment impact on the acceptance rate gap (groups A vs B).

    Callers must restrict the input to groups A and B beforehand; any other
    group is a precondition violation, not something silently dropped.
    """
    if not contacts:
        raise ParameterError("contacts must be non-empty")
    bad = sorted({c.guest_group for c in contacts} - {"A", "B"})
    if bad:
        raise ParameterError(f"contacts must be restricted to groups A and B, found {bad}")
    is_b = np.fromiter((c.guest_group == "B" for c in contacts), dtype=bool)
    treat = np.fromiter((c.host_arm == ARM_TREATMENT for c in contacts), dtype=bool)
    accepted = np.fromiter((c.accepted for c in contacts), dtype=bool)
    return estimate_effect_arrays(is_b, treat, accepted)


def power(estimates: Sequence[EffectEstimate]) -> float:
    """Fraction of estimates that rejected the null of no effect."""
    if not estimates:
        raise ParameterError("estimates must be non-empty")
    return sum(e.significant for e in estimates) / len(estimates)


def mde(power_by_effect: Mapping[float, float]) -> float | None:
    """Smallest effect magnitude whose power reaches 80 percent, if any."""
    if not power_by_effect:
        raise ParameterError("power_by_effect must be non-empty")
    qualifying = [abs(e) for e, pw in power_by_effect.items() if pw >= POWER_TARGET]
    return min(qualifying) if qualifying else None


def sample_skewness(values: Iterable[float]) -> float:
    """Adjusted Fisher-Pearson skewness: g1 * sqrt(n*(n-1)) / (n-2)."""
    x = np.asarray(list(values), dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ParameterError(f"skewness needs at least 3 values, got {n}")
    centered = x - x.mean()
    m2 = float(np.mean(centered**2))
    if m2 == 0.0:
        raise ParameterError("skewness undefined for a constant sample")
    g1 = float(np.mean(centered**3)) / m2**1.5
    return g1 * math.sqrt(n * (n - 1)) / (n - 2)


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov limiting distribution.

    Two classical series representations of the same function: the
    Jacobi-theta form converges fast for small arguments, the alternating
    exponential series for large ones.
    """
    if lam <= 0.0:
        return 1.0
    if lam < 1.18:
        q = math.exp(-(math.pi**2) / (8.0 * lam**2))
        # sum over odd squares: q^1 + q^9 + q^25 + ...
        total = sum(q ** ((2 * j - 1) ** 2) for j in range(1, 30))
        return max(0.0, min(1.0, 1.0 - math.sqrt(2.0 * math.pi) / lam * total))
    total = 0.0
    for j in range(1, 200):
        term = math.exp(-2.0 * j**2 * lam**2)
        total += -term if j % 2 == 0 else term
        if term < 1e-18:
            break
    return max(0.0, min(1.0, 2.0 * total))


def ks_test_normal(values: Iterable[float], mean: float, sd: float) -> tuple[float, float]:
    """One-sample KS statistic and asymptotic p-value against Normal(mean, sd)."""
    x = np.sort(np.asarray(list(values), dtype=np.float64))
    n = len(x)
    if n < 1:
        raise ParameterError("KS test needs at least one value")
    if sd <= 0:
        raise ParameterError(f"sd must be positive, got {sd}")
    cdf = ndtr((x - mean) / sd)
    steps = np.arange(n + 1) / n
    d_plus = float((steps[1:] - cdf).max())
    d_minus = float((cdf - steps[:-1]).max())
    stat = max(d_plus, d_minus, 0.0)
    return stat, kolmogorov_sf(stat * math.sqrt(n))


def summarize_runs(cs: Sequence[float], true_effect: float) -> RunSummary:
    """Mean, bias, spread, skewness, and normality diagnostic of observed effects.

    The KS test compares the sample against a normal with the sample's own
    mean and standard deviation (n-1 denominator), using the asymptotic
    Kolmogorov distribution for the p-value.
    """
    if len(cs) < 3:
        raise ParameterError(f"need at least 3 runs to summarize, got {len(cs)}")
    if true_effect == 0:
        raise ParameterError("true_effect must be nonzero for relative bias")
    x = np.asarray(cs, dtype=np.float64)
    mean_c = float(x.mean())
    sd_c = float(x.std(ddof=1))
    if sd_c == 0.0:
        raise ParameterError("observed effects are constant; KS diagnostic undefined")
    ks_stat, ks_pvalue = ks_test_normal(x, mean_c, sd_c)
    return RunSummary(
        n_sim_runs=len(cs),
        mean_c=mean_c,
        bias_pct=(mean_c - true_effect) / true_effect * 100.0,
        sd_c=sd_c,
        skew_c=sample_skewness(x),
        ks_stat=ks_stat,
        ks_pvalue=ks_pvalue,
    )
