"""Random-forest candidate selection, stepwise tree bagging and bias correction
for small-sample, high-dimensional regression."""

import numba as _numba

# the bundled TBB is too old for numba; skip it quietly
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .data import Dataset, SyntheticSpec, generate_synthetic, load_csv, make_target, standardize_target, write_csv  # noqa: E402
from .ensemble import (  # noqa: E402
    EnsembleConfig,
    EnsembleModel,
    ImportanceReport,
    ensemble_predict,
    fit_ensemble,
    oob_error,
    oob_predictions,
    permutation_importance,
)
from .pipeline import (  # noqa: E402
    PipelineConfig,
    PipelineModel,
    fit_bias_correction,
    fit_pipeline,
    one_tailed_ttest,
    predict,
    select_candidates,
    stepwise_build,
)
from .tree import RegressionTree, TreeConfig, fit_tree, predict_tree  # noqa: E402

__version__ = "0.1.0"


def set_threads(n):
    """Cap the number of worker threads used by compiled kernels."""
    if n is not None and n > 0:
        _numba.set_num_threads(min(int(n), _numba.config.NUMBA_NUM_THREADS))
