"""Bi-level neighbor maps on a small citation-like graph.

Clusters the nodes with capacity-constrained k-means, encodes every node's
edges as (which clusters) + (which members inside each cluster), decodes the
maps back to an edge list, and compares storage against a dense row.
"""

import numpy as np

from dog.clustering import balanced_kmeans, build_neighbor_maps, neighbor_maps_to_adjacency
from dog.datasets import make_cora_like

g = make_cora_like(scale=0.25, seed=0)
print(f"graph: {g.n_nodes} nodes, {g.n_edges} edges, {g.n_features} binary attributes")

k = 25
clusters = balanced_kmeans(g.attributes, k, seed=0)
print(f"k={k}, capacity={clusters.capacity}, sizes {clusters.sizes.min()}..{clusters.sizes.max()}")

nm = build_neighbor_maps(g, clusters)
deg = g.degrees()
touched = nm.inter.sum(1)
print(f"mean degree {deg.mean():.2f}; mean clusters touched per node {touched.mean():.2f}")

back = neighbor_maps_to_adjacency(nm, clusters)
print("round trip exact:", np.array_equal(back, g.edges))

# Decoder outputs per node: k inter scores plus one capacity-wide row per touched
# cluster, versus one score per node for a dense adjacency row.
bilevel = k + touched.mean() * clusters.capacity
print(f"outputs per node: bi-level {bilevel:.0f} vs dense {g.n_nodes}")

i = int(np.argmax(deg))
print(f"\nnode {i} (degree {deg[i]}):")
for kk in np.flatnonzero(nm.inter[i]):
    slots = np.flatnonzero(nm.intra_row(i, kk))
    print(f"  cluster {kk:2d}: slots {slots.tolist()} -> nodes {clusters.member_table()[kk, slots].tolist()}")
