"""Joint image-caption embeddings on top of full-network CNN features.

Submodules:
  tensorio    persistent formats (activations, manifests, stats, checkpoints)
  fne         pooling, standardization, ternary discretization
  textenc     tokenizer, vocabulary, GRU caption encoder
  mmspace     joint space: projection, cosine, ranking loss, gradients
  optim       ADAM, gradient clipping, the training loop
  evaluation  Recall@K / median-rank evaluation
  cli         command-line entry points
"""

__version__ = "0.1.0"
