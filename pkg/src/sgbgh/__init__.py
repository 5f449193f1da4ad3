"""Graph-convolutional binary codes for bipartite retrieval, scored with packed popcount."""
from .graph import BipartiteGraph, DatasetSplit, build_normalized_adjacency, load_edge_list, split_dataset
from .model import FinalEmbedding, LayerEmbeddings, ModelConfig, forward, init_embeddings
from .retrieval import PackedCodebook, load_codebook, save_codebook, topk_search
from .training import TrainConfig, train

__version__ = "0.1.0"
