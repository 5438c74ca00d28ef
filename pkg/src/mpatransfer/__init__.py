"""Majority predictor accuracy as a transferability score, with desk-scale
transfer learning runs, exact inequality checks, and norm-based capacity
reports for the associated risk bounds.
"""

from .labelstats import (
    CsvFormatError,
    EmpiricalJoint,
    MajorityPredictor,
    PairedLabelDataset,
    compute_mpa,
    empirical_joint,
    fit_majority_predictor,
    load_pairs_csv,
    make_dummy_source,
)
from .tinynet import (
    ConvLayer,
    DenseLayer,
    InitSnapshot,
    Network,
    RiskEstimate,
    empirical_risk_01,
    empirical_risk_margin,
    forward,
    join,
    load_network,
    mlp_template,
    predict_label,
    save_network,
    split,
    take_snapshot,
    true_risk_estimate,
)
from .transfer import (
    DEFAULT_GAMMA_GRID,
    AssumptionReport,
    TrainConfig,
    TrainingDivergedError,
    TransferOutcome,
    check_assumption1,
    gradient,
    run_transfer,
    train_source,
    train_target_head,
)
from .bounds import (
    BoundReport,
    ConvUnrolled,
    DegenerateActivationError,
    MarginRangeError,
    NormProfile,
    SingularLayerError,
    assemble_bound_report,
    capacity_conv,
    capacity_fc,
    conv_unroll,
    norm_21,
    norm_profile,
    patch_norms,
    spectral_norm,
)
from .experiment import (
    CorrelationResult,
    DegenerateDataError,
    LemmaVerdict,
    SyntheticTaskSuite,
    TransferInstance,
    p_value,
    pearson_r,
    run_correlation_experiment,
    verify_lemma1,
    verify_lemma2,
)

__version__ = "0.1.0"
