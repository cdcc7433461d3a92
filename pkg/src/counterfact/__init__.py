"""
Counterfactual panel estimation: synthetic control and its relatives.

Estimators share one balanced :class:`Panel` and a :class:`TreatmentSpec`
naming the treated unit, intervention period and analysis windows.
"""

__version__ = "0.1.0"

from counterfact.errors import (BalanceError, ConfigError, ConvergenceError, CounterfactError,
                                DegenerateError, DomainError, FormatError, GridError,
                                SingularityError, SpecError)
from counterfact.panel import (Panel, PredictorMatrices, PredictorSpec, TreatmentSpec,
                               build_predictors, load_panel, validate_balance)
from counterfact.simplex import project_simplex, solve_simplex_qp
from counterfact.scm import (EffectSummary, GapSeries, PredictorWeights, ScmFit, SolverConfig,
                             WeightVector, balance_table, effect_summary, fit_scm, gap_series,
                             inner_weights)
from counterfact.ascm import (AscmFit, ConformalResult, EstimatorConfig, GridConfig,
                              PermutationConfig, RidgeConfig, conformal_interval, fit_ascm)
from counterfact.sdid import SdidConfig, SdidFit, SdidInference, fit_sdid, sdid_dynamic, sdid_inference
from counterfact.factor import (CvConfig, FactorFit, FactorInference, McFit, factor_inference,
                                fit_ife, fit_matrix_completion, soft_threshold_step)
from counterfact.inference import (BackdateResult, LooResult, PermutationReport, PlaceboEnsemble,
                                   leave_one_out, mspe_ratio, permutation_p, placebo_in_space,
                                   placebo_in_time)
from counterfact.dgp import DgpSpec, RecoveryReport, TruthRecord, generate_panel, recovery_experiment
from counterfact.report import (SummaryColumn, emit_plot_data, render_balance_table,
                                render_summary_table)
from counterfact.pipeline import RunConfig, render_bundle, run_pipeline
