"""Writer retrieval pipeline: NetVLAD patch embeddings, generalized max-pooling,
power/PCA post-processing and reciprocal-neighbour query expansion."""

__version__ = "0.1.0"
