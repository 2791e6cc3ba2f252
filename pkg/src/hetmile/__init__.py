"""hetmile: multi-level embedding for heterogeneous graphs.

Pipeline: iteratively coarsen a typed graph, base-embed the coarsest level
with meta-path random walks + skip-gram, then refine embeddings back to the
original graph with a relation-typed graph convolution.
"""

__version__ = "0.1.0"

from .hetgraph import (HeteroGraph, TypeRegistry, build_graph, load_graph,
                       load_embeddings, save_embeddings)
from .coarsen import (CoarsenChain, CoarsenConfig, MatchingMatrix,
                      build_coarse_graph, coarsen_chain, jaccard,
                      match_jaccard_max, match_jaccard_wrs, match_lsh,
                      minhash_signature)
from .embed_base import (BaseEmbedder, MetaPath, WalkConfig, base_embed,
                         generate_walks, train_skipgram)
from .refine import (RefineConfig, RefinerParams, hgcn_forward, project,
                     refine_chain, train_refiner)
from .evaluate import (EvalReport, LabelSet, auroc, benchmark, link_prediction,
                       micro_f1, node_classification)

__all__ = [
    "HeteroGraph", "TypeRegistry", "build_graph", "load_graph",
    "load_embeddings", "save_embeddings",
    "CoarsenChain", "CoarsenConfig", "MatchingMatrix", "build_coarse_graph",
    "coarsen_chain", "jaccard", "match_jaccard_max", "match_jaccard_wrs",
    "match_lsh", "minhash_signature",
    "BaseEmbedder", "MetaPath", "WalkConfig", "base_embed", "generate_walks",
    "train_skipgram",
    "RefineConfig", "RefinerParams", "hgcn_forward", "project", "refine_chain",
    "train_refiner",
    "EvalReport", "LabelSet", "auroc", "benchmark", "link_prediction",
    "micro_f1", "node_classification",
]
