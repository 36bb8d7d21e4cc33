"""Graph augmentation by latent diffusion, with low-rank regularized node classification."""

from .graph import AttributedGraph, load_graph, save_graph
from .clustering import ClusterAssignment, NeighborMaps, balanced_kmeans, build_neighbor_maps, neighbor_maps_to_adjacency
from .gae import GaeConfig, train_gae, encode_all
from .ldm import LdmConfig, default_schedule, make_schedule, train_ldm, cfg_sample
from .augment import assemble_augmented_graph, decode_synthetic_structures, generate_synthetic_latents
from .lowrank import (
    GcnTrainConfig,
    LowRankConfig,
    eigen_projection,
    gram_matrix,
    linear_gd_oracle,
    train_node_classifier,
    truncated_nuclear_norm,
)

__version__ = "0.1.0"
