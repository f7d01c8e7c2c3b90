"""HMM scoring of static and dynamic symbol sequences with ROC/PR evaluation."""

from .corpus import (
    Corpus,
    Kind,
    RawTrace,
    SyntheticFamilySpec,
    UnknownPolicy,
    Vocabulary,
    build_vocabulary,
    decode,
    encode,
    extract_api_calls,
    extract_opcodes,
    generate_corpus,
    generate_family,
    load_corpus,
)
from .evaluation import (
    ConfusionCounts,
    Curve,
    ScoreSet,
    auc_roc_pairwise,
    confusion_at,
    expand_benign,
    imbalance_sweep,
    pr_curve,
    roc_curve,
)
from .experiment import (
    ALL_REGIMES,
    ExperimentConfig,
    FoldPlan,
    HmmConfig,
    Regime,
    RegimeReport,
    imbalance_report,
    make_folds,
    run_family_regime,
    run_matrix,
)
from .hmm import (
    BENIGN,
    Channel,
    HmmModel,
    SymbolSequence,
    TrainingOutcome,
    backward_pass,
    baum_welch_train,
    forward_log_likelihood,
    posterior_decode,
    sample_sequence,
    score,
    train_with_restarts,
)

__version__ = "0.1.0"
