"""
Template graph and two-hop mini-batches
=======================================

Every view is linked to the dictionary templates it resembles most under the
topological MSE, a patch-wise squared error that also penalizes errors in
neighboring patches. Training batches gather a few query views, their
template neighbors and those templates' own template neighbors.
"""
import numpy as np

from topocalib.datagen import CameraGrid, generate_dataset, sample_camera_grid, split_dataset
from topocalib.graph import build_graph, enumerate_candidate_links, sample_minibatch, similarity_score
from topocalib.losses import LossConfig
from topocalib.scene import ProceduralSpec, generate_procedural_bev

bev = generate_procedural_bev(ProceduralSpec(), seed=1)
grid = CameraGrid.for_bev(bev, total_count=400, seed=0)
manifest = generate_dataset(bev, sample_camera_grid(grid), (128, 128), 0.2)

# %%
# One fifth of the views become the dictionary; the rest split evenly into
# train and test.
manifest = split_dataset(manifest, dictionary_fraction=0.2, seed=0)
print(manifest.split_counts())

# %%
# Lower scores mean more similar. A view compared with itself scores zero.
a, b = manifest.samples[0].image, manifest.samples[1].image
print(f"score(a, a) = {similarity_score(a, a)}, score(a, b) = {similarity_score(a, b):.5f}")

# %%
# Each node keeps its k best dictionary neighbors.
graph = build_graph(manifest, k=10, cfg=LossConfig())
q = graph.nodes_in("train")[0]
print("query", graph.ids[q], "neighbors", [graph.ids[j] for j in graph.neighbors[q][:5]])
print("scores", np.round(graph.scores[q][:5], 5))

# %%
# A batch of seeds: hop one samples their template neighbors, hop two samples
# those templates' neighbors, and never leaves the dictionary. Every
# (seed, template) pair in the batch is a candidate link; true graph edges
# are the positives.
seeds = graph.nodes_in("train")[:4]
batch = sample_minibatch(graph, seeds, fanouts=(5, 3), rng_seed=0)
pairs, labels = enumerate_candidate_links(batch, graph)
print(f"{len(batch.nodes)} nodes, {len(pairs)} candidate links, {int(labels.sum())} positives")
