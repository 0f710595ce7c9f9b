"""Risk-aware offline/online resource trading simulator for integrated
sensing and communication networks."""

from __future__ import annotations

from isacmarket.harness import (
    DEFAULT_GRIDS,
    DEFAULT_THRESHOLDS,
    DEFAULT_WEIGHTS,
    METRIC_FIELDS,
    RESULT_COLUMNS,
    STRATEGIES,
    IngestionError,
    InteractionModel,
    MetricsReport,
    Scenario,
    ScenarioConfig,
    Strategy,
    TrialOutcome,
    compute_metrics,
    default_match_config,
    default_online_config,
    gen_synthetic,
    load_eua,
    load_scenario,
    metric_rows,
    monte_carlo_outcomes,
    offline_phase,
    offline_phases,
    read_results,
    resolve_strategy,
    run_monte_carlo,
    run_transaction,
    save_scenario,
    summarize_rows,
    write_results,
)
from isacmarket.market import (
    BaseStation,
    Coalition,
    CommContract,
    Expectations,
    Market,
    MobileUser,
    Realization,
    ResourceGrids,
    RiskThresholds,
    SensingContract,
    TempContract,
    check_feasibility,
    expect_beta,
    expect_vmax,
    expect_volunteer,
    form_coalitions,
)
from isacmarket.offline import (
    MatchConfig,
    OfflineResult,
    ProbeBudgetError,
    check_coalition_stability,
    check_individual_rationality,
    find_blocking_pairs,
    local_pareto_probe,
    run_offrfw2m,
)
from isacmarket.online import (
    OnlineConfig,
    OnlineResult,
    ResidualSupply,
    run_onebw2m,
    sample_realization,
)
from isacmarket.values import (
    LinkQuality,
    Position2D,
    ValueWeights,
    comm_rate,
    comm_value,
    compute_geometry,
    crlb_zeta_oracle,
    peb_simplified,
    sensing_value,
)

__version__ = "0.1.0"

__all__ = [
    "BaseStation",
    "Coalition",
    "CommContract",
    "DEFAULT_GRIDS",
    "DEFAULT_THRESHOLDS",
    "DEFAULT_WEIGHTS",
    "Expectations",
    "IngestionError",
    "InteractionModel",
    "LinkQuality",
    "METRIC_FIELDS",
    "Market",
    "MatchConfig",
    "MetricsReport",
    "MobileUser",
    "OfflineResult",
    "OnlineConfig",
    "OnlineResult",
    "Position2D",
    "ProbeBudgetError",
    "RESULT_COLUMNS",
    "Realization",
    "ResidualSupply",
    "ResourceGrids",
    "RiskThresholds",
    "STRATEGIES",
    "Scenario",
    "ScenarioConfig",
    "SensingContract",
    "Strategy",
    "TempContract",
    "TrialOutcome",
    "ValueWeights",
    "check_coalition_stability",
    "check_feasibility",
    "check_individual_rationality",
    "comm_rate",
    "comm_value",
    "compute_geometry",
    "compute_metrics",
    "crlb_zeta_oracle",
    "default_match_config",
    "default_online_config",
    "expect_beta",
    "expect_vmax",
    "expect_volunteer",
    "find_blocking_pairs",
    "form_coalitions",
    "gen_synthetic",
    "load_eua",
    "load_scenario",
    "local_pareto_probe",
    "metric_rows",
    "monte_carlo_outcomes",
    "offline_phase",
    "offline_phases",
    "peb_simplified",
    "read_results",
    "resolve_strategy",
    "run_monte_carlo",
    "run_offrfw2m",
    "run_onebw2m",
    "run_transaction",
    "save_scenario",
    "sensing_value",
    "summarize_rows",
    "write_results",
    "__version__",
]
