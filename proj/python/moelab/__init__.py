"""Dual-encoder mixture-of-experts trainer: float32 C++ core with a thin
Python surface for dataset generation, stage training, MoE assembly,
routing and evaluation."""

from ._moelab import (
    AttributeSpec,
    ConfigError,
    ContractError,
    DataError,
    DatasetSplit,
    DivergenceError,
    DualEncoder,
    EncoderConfig,
    FfnSnapshot,
    IoError,
    LoadError,
    MoEModel,
    PipelineConfig,
    SampleSet,
    ShapeError,
    StageConfig,
    TrainConfig,
    assemble_moe,
    assemble_upcycled,
    attribute_labels,
    generate_dataset,
    linear_probe,
    load_dataset_csv,
    load_dual_encoder,
    load_moe,
    load_pipeline_config,
    load_snapshot,
    masked_infonce,
    recall_at_k,
    route,
    routing_stats,
    run_mcl,
    run_pipeline,
    save_checkpoint,
    save_dataset_csv,
    save_moe,
    save_snapshot,
    train_contrastive,
    train_router,
)

__all__ = [
    "AttributeSpec",
    "ConfigError",
    "ContractError",
    "DataError",
    "DatasetSplit",
    "DivergenceError",
    "DualEncoder",
    "EncoderConfig",
    "FfnSnapshot",
    "IoError",
    "LoadError",
    "MoEModel",
    "PipelineConfig",
    "SampleSet",
    "ShapeError",
    "StageConfig",
    "TrainConfig",
    "assemble_moe",
    "assemble_upcycled",
    "attribute_labels",
    "generate_dataset",
    "linear_probe",
    "load_dataset_csv",
    "load_dual_encoder",
    "load_moe",
    "load_pipeline_config",
    "load_snapshot",
    "masked_infonce",
    "recall_at_k",
    "route",
    "routing_stats",
    "run_mcl",
    "run_pipeline",
    "save_checkpoint",
    "save_dataset_csv",
    "save_moe",
    "save_snapshot",
    "train_contrastive",
    "train_router",
]
