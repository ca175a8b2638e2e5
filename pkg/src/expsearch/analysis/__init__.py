from .anova import AnovaResult, anova_balanced, anova_oneway, anova_twoway, oneway_anova
from .convergence import (
    AnalysisError,
    BestSeries,
    FitResult,
    cumulative_best,
    detect_jumps,
    fit_model,
    permutation_r2_baseline,
    select_model_aic,
    simple_regret,
)
from .dynamics import (
    DynamicsSeries,
    entropy_series,
    fit_innovation_decay,
    innovation_series,
    jsd,
    jsd_series,
)
from .stats import chi2_representativeness, enrichment_ratio, group_mean_table, rank_correlation

__all__ = [
    "AnalysisError", "AnovaResult", "BestSeries", "DynamicsSeries", "FitResult",
    "anova_balanced", "anova_oneway", "anova_twoway", "chi2_representativeness",
    "cumulative_best", "detect_jumps", "enrichment_ratio", "entropy_series",
    "fit_innovation_decay", "fit_model", "group_mean_table", "innovation_series", "jsd",
    "jsd_series", "oneway_anova", "permutation_r2_baseline", "rank_correlation",
    "select_model_aic", "simple_regret",
]
