"""Contrastive embedding training engine.

Trains compact text embedders with an in-batch contrastive objective that
masks false negatives, up-weights hard negatives, and learns per-task
softmax temperatures; ships a synthetic benchmark generator, a two-stage
training loop, brute-force retrieval evaluation, low-rank adapter souping,
and a CLI tying it all together.
"""

__version__ = "0.1.0"

from .data import (
    DatasetManifest,
    DatasetSpec,
    GenerationSpec,
    PromptTemplate,
    Record,
    build_prompt,
    cap_dataset,
    default_generation_spec,
    generate_benchmark,
    merge_classification_datasets,
    read_manifest,
    split_manifest,
    write_manifest,
)
from .encoder import (
    EncoderParams,
    Featurizer,
    LoraAdapter,
    encode,
    encode_backward,
    encode_batch,
    featurize,
    init_adapter,
    init_encoder_params,
)
from .estimator import ContrastiveEmbedder
from .evaluation import (
    EvalConfig,
    EvalReport,
    ablation_benchmark,
    ablation_run_config,
    evaluate,
    mix_overrides,
    run_ablation,
    run_soup_experiment,
    strategy_grid,
)
from .losses import (
    ContrastiveBatch,
    LossConfig,
    LossOutput,
    false_negative_mask,
    hardness_weights,
    infonce_loss,
    task_temperature,
    whnm_loss,
)
from .matrixops import l2_normalize, logsumexp, normalize_rows, similarity_matrix
from .sampler import BatchSampler, SamplerConfig
from .souping import SoupSpec, SoupResult, merge_into_base, soup_adapters
from .trainer import (
    RunConfig,
    StageConfig,
    TrainConfig,
    TrainResult,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "BatchSampler",
    "ContrastiveBatch",
    "ContrastiveEmbedder",
    "DatasetManifest",
    "DatasetSpec",
    "EncoderParams",
    "EvalConfig",
    "EvalReport",
    "Featurizer",
    "GenerationSpec",
    "LoraAdapter",
    "LossConfig",
    "LossOutput",
    "PromptTemplate",
    "Record",
    "RunConfig",
    "SamplerConfig",
    "SoupResult",
    "SoupSpec",
    "StageConfig",
    "TrainConfig",
    "TrainResult",
    "ablation_benchmark",
    "ablation_run_config",
    "build_prompt",
    "cap_dataset",
    "cosine_lr",
    "default_generation_spec",
    "encode",
    "encode_backward",
    "encode_batch",
    "evaluate",
    "false_negative_mask",
    "featurize",
    "generate_benchmark",
    "hardness_weights",
    "infonce_loss",
    "init_adapter",
    "init_encoder_params",
    "l2_normalize",
    "load_checkpoint",
    "logsumexp",
    "merge_classification_datasets",
    "merge_into_base",
    "mix_overrides",
    "normalize_rows",
    "read_manifest",
    "run_ablation",
    "run_soup_experiment",
    "save_checkpoint",
    "similarity_matrix",
    "soup_adapters",
    "split_manifest",
    "strategy_grid",
    "task_temperature",
    "train",
    "whnm_loss",
    "write_manifest",
]
