"""anomkit: threshold-free industrial anomaly detection toolkit."""

from .core_math import (
    LossWeights,
    bilinear_upsample,
    cross_entropy_loss,
    dice_loss,
    focal_loss,
    l2_normalize,
    softmax_pair,
    total_loss,
)
from .datasets import SuiteConfig, build_synthetic_suite, load_mvtec_layout
from .decoder import (
    DecoderParams,
    TrainConfig,
    decoder_loss,
    init_decoder_params,
    localize,
    loss_gradients,
    project_stage,
    train_decoder,
)
from .eval_harness import (
    EvalReport,
    accuracy,
    pixel_auc,
    roc_auc,
    run_experiment,
    threshold_sweep,
)
from .features import (
    FeatureBackendConfig,
    PatchFeatureStack,
    load_features,
    save_features,
    toy_extract,
)
from .fewshot import MemoryBank, build_memory_bank, localize_fewshot
from .judge import (
    CalibratedThreshold,
    Verdict,
    calibrate_threshold,
    grid_cells,
    image_score,
    render_verdict,
)
from .prompt_learner import (
    PromptLearnerParams,
    PromptRecord,
    assemble_prompt_record,
    image_embed,
    init_prompt_learner,
    prompt_forward,
)
from .simulation import (
    AnomalySample,
    RegionConfig,
    RegionSpec,
    SimulateConfig,
    cut_paste,
    poisson_blend,
    sample_region,
    simulate_anomaly,
)
from .text_prompts import (
    CategoryDescription,
    PromptEnsemble,
    TextFeaturePair,
    build_text_features,
    compose_ensemble,
    description_for,
    toy_text_embed,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalySample",
    "CalibratedThreshold",
    "CategoryDescription",
    "DecoderParams",
    "EvalReport",
    "FeatureBackendConfig",
    "LossWeights",
    "MemoryBank",
    "PatchFeatureStack",
    "PromptEnsemble",
    "PromptLearnerParams",
    "PromptRecord",
    "RegionConfig",
    "RegionSpec",
    "SimulateConfig",
    "SuiteConfig",
    "TextFeaturePair",
    "TrainConfig",
    "Verdict",
    "accuracy",
    "assemble_prompt_record",
    "bilinear_upsample",
    "build_memory_bank",
    "build_synthetic_suite",
    "build_text_features",
    "calibrate_threshold",
    "compose_ensemble",
    "cross_entropy_loss",
    "cut_paste",
    "decoder_loss",
    "description_for",
    "dice_loss",
    "focal_loss",
    "grid_cells",
    "image_embed",
    "image_score",
    "init_decoder_params",
    "init_prompt_learner",
    "l2_normalize",
    "load_features",
    "load_mvtec_layout",
    "localize",
    "localize_fewshot",
    "loss_gradients",
    "pixel_auc",
    "poisson_blend",
    "project_stage",
    "prompt_forward",
    "render_verdict",
    "roc_auc",
    "run_experiment",
    "sample_region",
    "save_features",
    "simulate_anomaly",
    "softmax_pair",
    "threshold_sweep",
    "total_loss",
    "toy_extract",
    "toy_text_embed",
    "train_decoder",
]
