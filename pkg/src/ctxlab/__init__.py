"""ctxlab: a context-length scaling laboratory.

Builds position-weighted multitask sparse-parity benchmarks with exact
minimum-loss oracles, trains small feed-forward networks across (dataset
size x context length) grids, measures intrinsic dimension and entropy from
PCA spectra of learned features, and fits the scaling-law forms that relate
loss, dimension and context length.
"""

__version__ = "0.1.0"

from .numerics import (
    EigenSpectrum,
    EntropyEstimate,
    LinearFit,
    NumericalError,
    PowerLawFit,
    SpectrumDecayFit,
    fit_linear,
    fit_power_law,
    fit_spectrum_decay,
    gaussian_kde_entropy,
    pca,
    sym_eig,
)
from .parity import (
    Dataset,
    LossDecomposition,
    MaskPolicy,
    ParityConfig,
    Sample,
    TaskSpec,
    bayes_posterior,
    bayes_posteriors,
    bayes_risk,
    canonical_task_set,
    config_from_json,
    config_to_json,
    decompose_loss,
    gen_dataset,
    solvable_tasks,
    split_disjoint,
)
from .nn import (
    Mlp,
    MlpSpec,
    SplitModel,
    SplitModelSpec,
    TrainConfig,
    TrainHistory,
    backward,
    extract_context_features,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .idlab import (
    CeIdReport,
    IdMeasurement,
    ce_vs_id_report,
    find_consistent_threshold,
    measure_id,
    subspace_entropy,
)
from .scaling import (
    LossModelParams,
    NnScalingResult,
    RunRecord,
    SweepPlan,
    SweepReport,
    capped_nn_mean,
    model_loss,
    nn_scaling_exponent,
    optimal_context,
    run_sweep,
)
