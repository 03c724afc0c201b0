"""Multimodal speech-based suicide-risk screening pipeline.

Handcrafted acoustic features, pooling of precomputed foundation-model
embeddings, three fusion classifiers trained from scratch in numpy,
evaluation metrics and t-SNE embedding analysis.
"""

__version__ = "0.1.0"
