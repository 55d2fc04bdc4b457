"""Skeleton-based gait identification with partitioned spatio-temporal graph convolutions."""

from .data import (
    DatasetProtocol,
    ProtocolSpec,
    SkeletonSequence,
    assemble_sequence,
    build_protocol,
    load_dataset,
    normalize_sequence,
    parse_pose_keypoints,
)
from .estimator import GaitEmbedder, GalleryMatcher
from .evaluate import AccuracyReport, GalleryIndex, build_gallery, evaluate, identify, render_report
from .graph import SkeletonLayout, build_layout, normalized_adjacency, partition_adjacency
from .metric import batch_hard_loss, batch_hard_triplets, pairwise_distances, triplet_loss
from .nn import GaitNet, NetworkConfig, build_network, embed
from .synth import SynthConfig, WalkerParams, generate_dataset, synth_walker
from .train import TrainConfig, load_checkpoint, restore_model, save_checkpoint, train

__version__ = "0.1.0"
