"""Dual-channel cross-modal denoising diffusion over item feature states.

Forward kernel: q(h_t | h_0) = N(sqrt(alpha_bar_t) h_0, (1 - alpha_bar_t) I).
The denoiser predicts the clean state h_0 (that is what the reconstruction
loss trains), and the reverse-step mean substitutes the implied noise
estimate eps_hat = (h_t - sqrt(alpha_bar_t) h0_hat) / sqrt(1 - alpha_bar_t)
into mu = (h_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t).

Each modality channel corrupts its own smoothed representation and
reconstructs it conditioned on the other modality; the elementwise mean of
the two reconstructions is the confounder representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha_bar / posterior variance arrays.

    Steps are 1-based: beta[t-1] belongs to step t, and alpha_bar_at(0) = 1
    (empty product).
    """

    beta: np.ndarray
    kind: str = "explicit"
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    posterior_var: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a nonempty 1-d array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta values must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if np.any(np.diff(alpha_bar) >= 0) or np.any(alpha_bar <= 0) or np.any(alpha_bar >= 1):
            raise ValueError("alpha_bar must be strictly decreasing within (0, 1)")
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
        for name, arr in (("beta", beta), ("alpha", alpha),
                          ("alpha_bar", alpha_bar), ("posterior_var", posterior_var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_steps(self) -> int:
        return int(self.beta.size)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 0 <= t <= T, with the empty-product convention."""
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"t must lie in [0, {self.num_steps}], got {t}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_manifest(self) -> dict:
        return {
            "T": self.num_steps,
            "kind": self.kind,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
        }


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        # squared-cosine alpha_bar curve; betas clipped into the given range
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        curve = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1.0 - curve[1:] / curve[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(beta=beta, kind=kind)


def _per_step(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Step-indexed coefficients shaped (B, 1) for scalar or per-row t."""
    arr = torch.as_tensor(values.copy(), dtype=like.dtype, device=like.device)
    t_idx = torch.as_tensor(t, dtype=torch.long, device=like.device)
    out = arr[t_idx - 1]
    if out.ndim == 0:
        return out
    return out.view(-1, 1)


def _check_t(t, T: int, allow_zero: bool = False) -> None:
    t_arr = np.asarray(t)
    lo = 0 if allow_zero else 1
    if t_arr.size == 0 or t_arr.min() < lo or t_arr.max() > T:
        raise ValueError(f"t must lie in [{lo}, {T}], got {t}")


def forward_diffuse(h0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """h_t = sqrt(alpha_bar_t) h0 + sqrt(1 - alpha_bar_t) noise; t=0 is h0."""
    if noise.shape != h0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != h0 shape {tuple(h0.shape)}")
    _check_t(t, schedule.num_steps, allow_zero=True)
    if np.isscalar(t) and t == 0:
        return h0.clone()
    ab = _per_step(schedule.alpha_bar, t, h0)
    return torch.sqrt(ab) * h0 + torch.sqrt(1.0 - ab) * noise


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos position features of the integer timestep."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half, 1)
    )
    angles = t.view(-1, 1) * freqs.view(1, -1)
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def init_linear_(layer: nn.Linear, generator: torch.Generator | None) -> None:
    # uniform(-1/sqrt(fan_in), +) drawn from an explicit generator so module
    # construction order never shifts another module's stream
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


class ConditionalDenoiser(nn.Module):
    """2-layer MLP f(h_t, t, condition) -> h0_hat of the state dimension."""

    def __init__(
        self,
        state_dim: int,
        cond_dim: int,
        time_dim: int = 16,
        hidden_dim: int | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.state_dim = state_dim
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        hidden_dim = hidden_dim or 4 * state_dim
        self.cond_proj = nn.Linear(cond_dim, state_dim)
        self.fc1 = nn.Linear(2 * state_dim + time_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, state_dim)
        self.act = nn.SiLU()
        for layer in (self.cond_proj, self.fc1, self.fc2):
            init_linear_(layer, generator)

    def forward(self, h_t: torch.Tensor, t, condition: torch.Tensor) -> torch.Tensor:
        t_vec = torch.as_tensor(t, dtype=h_t.dtype, device=h_t.device)
        if t_vec.ndim == 0:
            t_vec = t_vec.expand(h_t.shape[0])
        temb = sinusoidal_time_embedding(t_vec, self.time_dim)
        x = torch.cat([h_t, temb, self.cond_proj(condition)], dim=1)
        return self.fc2(self.act(self.fc1(x)))


def denoise_mean(h_t: torch.Tensor, t: int, condition: torch.Tensor, denoiser, schedule: NoiseSchedule) -> torch.Tensor:
    """Reverse-step mean from an h0-predicting denoiser (see module docstring)."""
    t = int(t)
    _check_t(t, schedule.num_steps)
    h0_hat = denoiser(h_t, t, condition)
    ab = schedule.alpha_bar_at(t)
    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    eps_hat = (h_t - math.sqrt(ab) * h0_hat) / math.sqrt(1.0 - ab)
    return (h_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)


def reverse_denoise(
    h_start: torch.Tensor,
    condition: torch.Tensor,
    denoiser,
    schedule: NoiseSchedule,
    mode: str = "deterministic",
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Iterate t = T..1; h_{t-1} = mu (+ sigma_t eps in stochastic mode)."""
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    h = h_start
    for t in range(schedule.num_steps, 0, -1):
        h = denoise_mean(h, t, condition, denoiser, schedule)
        if mode == "stochastic":
            var = float(schedule.posterior_var[t - 1])
            if var > 0:
                noise = torch.empty_like(h).normal_(generator=rng)
                h = h + math.sqrt(var) * noise
        if not torch.isfinite(h).all():
            raise RuntimeError(f"reverse diffusion produced non-finite values at step {t}")
    return h


def diffusion_loss(
    h0_batch: torch.Tensor,
    condition_batch: torch.Tensor,
    denoiser,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """E_t,eps || h0 - f(h_t, t, cond) ||^2, mean of per-row squared norms."""
    if h0_batch.shape[0] == 0:
        raise ValueError("empty batch")
    T = schedule.num_steps
    t = torch.randint(1, T + 1, (h0_batch.shape[0],), generator=rng, device=h0_batch.device)
    noise = torch.empty_like(h0_batch).normal_(generator=rng)
    h_t = forward_diffuse(h0_batch, t, noise, schedule)
    pred = denoiser(h_t, t, condition_batch)
    return ((h0_batch - pred) ** 2).sum(dim=1).mean()


@dataclass(frozen=True)
class ConfounderRepr:
    """Reconstructed clean states per channel plus their elementwise mean."""

    visual: torch.Tensor
    textual: torch.Tensor
    fused: torch.Tensor

    def __post_init__(self):
        for name in ("visual", "textual", "fused"):
            t = getattr(self, name)
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} confounder matrix contains non-finite values")


def extract_confounders(
    h_visual: torch.Tensor,
    h_textual: torch.Tensor,
    cond_visual: torch.Tensor,
    cond_textual: torch.Tensor,
    denoiser_visual,
    denoiser_textual,
    schedule: NoiseSchedule,
    mode: str = "deterministic",
    rng: torch.Generator | None = None,
) -> ConfounderRepr:
    """Corrupt each channel to t=T and reconstruct it from the other modality.

    The deterministic default starts from the noise-free damped state
    sqrt(alpha_bar_T) h so extraction is a pure function of (inputs, weights);
    stochastic mode draws the start noise and path from ``rng``.
    """
    T = schedule.num_steps
    scale = math.sqrt(schedule.alpha_bar_at(T))
    outs = []
    for h, cond, den in (
        (h_visual, cond_textual, denoiser_visual),
        (h_textual, cond_visual, denoiser_textual),
    ):
        start = scale * h
        if mode == "stochastic":
            noise = torch.empty_like(h).normal_(generator=rng)
            start = start + math.sqrt(1.0 - scale**2) * noise
        with torch.no_grad():
            outs.append(reverse_denoise(start, cond, den, schedule, mode=mode, rng=rng))
    visual, textual = outs
    return ConfounderRepr(visual=visual, textual=textual, fused=(visual + textual) / 2.0)
