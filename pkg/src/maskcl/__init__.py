"""Silhouette-driven contrastive learning for clothes-change re-id, desk scale."""

from .data import (
    ConfigError,
    DatasetError,
    DatasetManifest,
    Sample,
    SyntheticConfig,
    dataset_hash,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .encoder import EncoderConfig, TwoBranchModel, build_model, load_checkpoint, save_checkpoint
from .evaluation import (
    EvalMeta,
    EvalReport,
    RetrievalTask,
    compute_map_cmc,
    oracle_map_cmc,
    pairwise_distance,
    valid_gallery_mask,
)
from .losses import (
    LossBreakdown,
    PosteriorVector,
    loss_crossview,
    loss_neighbor,
    loss_prototypical,
    loss_total,
    posterior,
)
from .memory import BankTriplet, FeatureBank, init_banks
from .structure import (
    OUTLIER,
    ClusteringConfig,
    ClusterState,
    NeighborDraw,
    build_neighbor_sets,
    cluster_instances,
    cluster_similarity,
    compute_fused_centers,
    curriculum_k,
    sample_neighbors,
)
from .trainer import ClusteringCollapseError, EpochDiagnostics, TrainConfig, extract_features, pk_sample, run_training

__version__ = "0.1.0"
