"""Deconfounded multimodal recommender.

Core pipeline: item-item semantic graphs smooth the modality features, a pair of
cross-conditioned denoising diffusion channels distills a shared confounder
representation, a vector-quantized codebook turns it into discrete environment
strata (back-door adjustment), and a learned edge mask prunes the interaction
graph into a causal subgraph (front-door adjustment) feeding a LightGCN-style
ranking backbone.
"""

__version__ = "0.1.0"
