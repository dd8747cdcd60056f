# Constant tables shared by the estimation modules.

SCHEMA_VERSION = 1

# probability-type nuisances of fitted learners are clipped to this range
PROB_CLIP = (0.01, 0.99)

# lower bound on the instrument's effect on take-up
NU_MIN = 0.01

# smallest singular value accepted for a Jacobian before inversion
JACOBIAN_MIN_SV = 1e-10

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100

learner_defaults = {
    "l2_penalty": 1e-4,
    "trees": 200,
    "depth": 3,
    "learning_rate": 0.1,
    "min_leaf": 5,
}

# learner kind used for each nuisance slot when the caller does not configure one
slot_defaults = {
    "propensity": "logistic",
    "outcome": "gbt",
    "regression": "gbt",
    "instrument": "logistic",
    "treatment": "logistic",
}

ESTIMANDS = ["quantile", "quantile_cvar", "expectile", "lqte"]
VARIANTS = ["ldml1", "ldml2"]
AGGREGATES = ["median", "mean", "trimmed_mean"]
JACOBIAN_RECIPES = ["kde_quantile", "qcvar_block", "expectile_cdf", "kde_lqte"]
SOLVER_HINTS = ["monotone_step", "step_scan_then_linear", "bisection"]

# simulation study
STUDY_NAME = "paper-sim"
STUDY_METHODS = ["ldml", "ipw", "dml_d"]
STUDY_N_GRID = [100, 200, 400, 800, 1600, 3200, 6400, 12800, 25600]
STUDY_REPS = 75
STUDY_RUNS = 3
STUDY_GAMMA = 2.0 / 3.0
STUDY_DIM = 20
MC_DRAWS = 10 ** 6

# learners used by the study: shallow boosting for the propensity; the conditional CDF,
# fitted once per fold by LDML and once per grid point by DML-D, is a logistic model
study_learners = {
    "propensity": {"kind": "gbt", "trees": 50, "depth": 2, "learning_rate": 0.2, "min_leaf": 10},
    "cdf": {"kind": "logistic"},
}
