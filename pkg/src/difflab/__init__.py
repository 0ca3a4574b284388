"""difflab: a desk-scale lab for zero-shot classification with toy
conditional denoisers on a synthetic compositional scene world."""

from .scenes import (
    COLOR_NAMES,
    IMAGE_SHAPE,
    SHAPE_NAMES,
    Relation,
    SceneObject,
    SceneSpec,
    Style,
    TaskType,
    caption,
    parse_caption,
    render,
    sample_scene,
    verify,
)
from .denoiser import (
    DenoiserModel,
    NoiseSchedule,
    TrainConfig,
    forward_ddpm,
    forward_rf,
    partial_denoise_sweep,
    sample,
    train,
)
from .classifier import (
    EvalSet,
    ScoreClassifier,
    build_eval_set,
    group_score,
    posterior,
    predict,
    score_errors,
)
from .sct import ScoreTensor, read_sct, verify_sct, write_sct
from .weights import (
    FitConfig,
    WeightFitter,
    WeightFunction,
    eval_weight,
    fit_weights,
    lowshot_split,
)
from .benchmark import (
    Benchmark,
    BenchmarkItem,
    EvalReport,
    build_benchmark,
    cross_domain_matrix,
    evaluate,
    gen_disc_correlation,
    negatives_for,
)
from .domaingap import (
    HandcraftedFeatures,
    diversity_stats,
    domain_distance,
    gap_vs_gain_report,
)

__version__ = "0.1.0"
