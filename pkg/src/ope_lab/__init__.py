"""Off-policy evaluation with oracle and history-dependent estimated behavior policies."""
from .analysis import (
    EstimatorConfig,
    HistorySelection,
    ProjectionReport,
    SweepReport,
    coverage_diagnostics,
    projection_variance,
    run_bandit_sweep,
    run_sweep,
    select_from_variances,
    select_history,
)
from .environments import (
    BanditSpec,
    CartPoleSpec,
    Dataset,
    TabularMDPSpec,
    Trajectory,
    default_bandit,
    monte_carlo_value,
    reference_mdp,
    sample_bandit_dataset,
    sample_trajectories,
)
from .estimators import (
    ISWeights,
    MISRatioModel,
    QFunction,
    bandit_is,
    compute_weights,
    dr,
    drl_linear,
    fit_mis_ratios,
    mis,
    ois,
    sis,
)
from .policies import (
    FitReport,
    ParametricHistoryPolicy,
    fisher_information,
    fit_mle,
    fit_tabular,
    score_vector,
)

__version__ = "0.1.0"
