"""Environment codebook: vector quantization of the confounder representation.

Items are assigned to K learnable environment strata. Training uses hard
nearest-neighbor assignment with a straight-through gradient copy; inference
blends codes under a softmax of negative squared distances, which generalizes
to confounder vectors between strata.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus
from torch import nn


class EnvironmentCodebook(nn.Module):
    """K x D learnable stratum vectors."""

    def __init__(self, vectors: torch.Tensor):
        super().__init__()
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise ValueError(f"codebook needs K >= 2 rows, got shape {tuple(vectors.shape)}")
        if not torch.isfinite(vectors).all():
            raise ValueError("codebook vectors must be finite")
        if len(torch.unique(vectors, dim=0)) != vectors.shape[0]:
            raise ValueError("codebook rows must be distinct at initialization")
        self.vectors = nn.Parameter(vectors.clone())

    @property
    def num_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def init_kmeans_pp(cls, points: torch.Tensor, num_codes: int, seed: int) -> "EnvironmentCodebook":
        """Seed the codebook with k-means++ centers over an initial pass."""
        x = points.detach().cpu().numpy().astype(np.float64)
        centers, _ = kmeans_plusplus(x, n_clusters=num_codes, random_state=seed)
        # de-duplicate (possible when the data itself has duplicate rows)
        rng = np.random.default_rng(seed)
        for _ in range(100):
            _, uniq_idx = np.unique(centers, axis=0, return_index=True)
            if len(uniq_idx) == num_codes:
                break
            dupes = np.setdiff1d(np.arange(num_codes), uniq_idx)
            centers[dupes] += 1e-3 * rng.standard_normal((len(dupes), centers.shape[1]))
        return cls(torch.as_tensor(centers, dtype=points.dtype))


def _vectors(codebook) -> torch.Tensor:
    return codebook.vectors if hasattr(codebook, "vectors") else codebook


def _sq_distances(points: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    if points.shape[1] != codes.shape[1]:
        raise ValueError(
            f"dimension mismatch: points are {points.shape[1]}-d, codes are {codes.shape[1]}-d"
        )
    diff = points.unsqueeze(1) - codes.unsqueeze(0)  # (N, K, D)
    return (diff**2).sum(dim=2)


def assign_hard(points: torch.Tensor, codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest code per row; ties resolve to the lowest code index."""
    codes = _vectors(codebook)
    d2 = _sq_distances(points, codes)
    hard = torch.argmin(d2, dim=1)  # first minimum = lowest index
    return hard, codes[hard]


def assign_soft(
    points: torch.Tensor, codebook, temperature: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(-d^2 / temperature) over codes; blended vectors are soft @ codes."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    codes = _vectors(codebook)
    d2 = _sq_distances(points, codes)
    soft = torch.softmax(-d2 / temperature, dim=1)
    return soft, soft @ codes


def vq_losses(
    points: torch.Tensor, codebook, hard: torch.Tensor, commitment_weight: float = 0.25
) -> torch.Tensor:
    """Codebook + commitment terms, mean per-item squared distance.

    ||sg(H) - q||^2 moves codes toward the data; the commitment term scaled by
    commitment_weight moves the encoder toward its code (through the
    straight-through copy) when the encoder is trainable.
    """
    quantized = _vectors(codebook)[hard]
    codebook_term = ((points.detach() - quantized) ** 2).sum(dim=1).mean()
    commitment_term = ((points - quantized.detach()) ** 2).sum(dim=1).mean()
    return codebook_term + commitment_weight * commitment_term


def straight_through(points: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value of the quantized vectors, gradient of the inputs."""
    return points + (quantized - points).detach()


def assignment_records(hard: torch.Tensor, soft: torch.Tensor) -> list[dict]:
    """Per-item export rows: hard stratum plus the full soft distribution."""
    hard_l = hard.detach().cpu().tolist()
    soft_l = soft.detach().cpu().tolist()
    return [
        {"item": i, "stratum": int(k), "soft": [float(p) for p in row]}
        for i, (k, row) in enumerate(zip(hard_l, soft_l))
    ]
