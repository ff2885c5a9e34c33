"""Stochastic bit-plane quantization.

Pixels arrive in [0, 1]. They are rescaled to the integer intensity range
``v = x * (2**n - 1)`` (kept continuous, never rounded), coarsened, and mapped
back. In ``stochastic`` mode the coarsening is

    v_pre = v + u,            u ~ U(-2**(k-2), 2**(k-2))  per pixel
    v_q   = v_pre - (v_pre mod 2**k)                      floor-mod
    v_q   = v_q + 2**(k-1)
    v_q   = clip(v_q, 0, 2**n - 1)

``simple`` drops the noise and ``uniform_noise`` skips quantization and only
adds U(-2**(k-1), 2**(k-1)) noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

MODES = ("stochastic", "simple", "uniform_noise")


@dataclass(frozen=True)
class QuantConfig:
    n: int = 8
    k: int = 5
    mode: str = "stochastic"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"bit depth n must be >= 2, got {self.n}")
        if not 1 <= self.k <= self.n - 1:
            raise ValueError(f"k must be in [1, n-1] = [1, {self.n - 1}], got {self.k}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def vmax(self) -> int:
        return 2 ** self.n - 1

    @property
    def noise_halfwidth(self) -> float:
        """Half-width of the pre-quantization noise (uniform-noise half-width in that mode)."""
        if self.mode == "uniform_noise":
            return 2.0 ** (self.k - 1)
        if self.mode == "simple":
            return 0.0
        return 2.0 ** (self.k - 2)

    def levels(self) -> list[int]:
        """Output intensities reachable in stochastic/simple mode."""
        step, shift = 2 ** self.k, 2 ** (self.k - 1)
        lattice = [m * step + shift for m in range(2 ** (self.n - self.k))]
        return sorted({0, self.vmax, *[v for v in lattice if v <= self.vmax]})


def quantize_levels(v: torch.Tensor, noise: torch.Tensor | float, k: int, n: int) -> torch.Tensor:
    """Quantize integer-domain intensities ``v`` given explicit pre-quantization noise."""
    step = 2.0 ** k
    v_pre = v + noise
    v_q = v_pre - torch.remainder(v_pre, step)
    v_q = v_q + 2.0 ** (k - 1)
    return v_q.clamp(0.0, 2.0 ** n - 1)


def _uniform(shape, halfwidth: float, generator, like: torch.Tensor) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=like.dtype, device=like.device)
    return (2.0 * u - 1.0) * halfwidth


def _generator(noise_seed, generator):
    if generator is not None:
        return generator
    if noise_seed is None:
        raise ValueError("pass either noise_seed or generator")
    return torch.Generator().manual_seed(int(noise_seed))


def quantize_batch(x: torch.Tensor, cfg: QuantConfig, noise_seed: int | None = None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Coarsen a batch of [0, 1] pixels; one independent noise draw per pixel.

    Deterministic for a fixed ``noise_seed``. A ``generator`` may be passed
    instead to draw successive fresh noise from one stream.
    """
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("pixels must lie in [0, 1]")
    with torch.no_grad():
        return _quantize(x, cfg, _generator(noise_seed, generator))[0]


def _quantize(x, cfg, gen):
    vmax = float(cfg.vmax)
    v = x * vmax
    if cfg.mode == "uniform_noise":
        raw = v + _uniform(x.shape, 2.0 ** (cfg.k - 1), gen, x)
    else:
        noise = _uniform(x.shape, 2.0 ** (cfg.k - 2), gen, x) if cfg.mode == "stochastic" else 0.0
        v_pre = v + noise
        raw = v_pre - torch.remainder(v_pre, 2.0 ** cfg.k) + 2.0 ** (cfg.k - 1)
    inside = (raw >= 0) & (raw <= vmax)
    return raw.clamp(0.0, vmax) / vmax, inside


def quantize_ste(x: torch.Tensor, cfg: QuantConfig, generator: torch.Generator) -> torch.Tensor:
    """Quantize with a straight-through gradient: d q / d x = 1 where unclipped, else 0."""
    with torch.no_grad():
        q, inside = _quantize(x.detach(), cfg, generator)
    return q + (x - x.detach()) * inside.to(x.dtype)


def bin_assignment_probability(v: float, q_level: int, cfg: QuantConfig, trials: int,
                               seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo estimate of P[quantize(v) == q_level] and its standard error.

    ``v`` and ``q_level`` are integer-domain intensities. Valid levels are
    ``m * 2**k + 2**(k-1)`` inside ``[0, 2**n - 1]`` plus the clip endpoints.
    """
    if cfg.mode != "stochastic":
        raise ValueError("bin assignment probabilities are defined for stochastic mode")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if q_level not in cfg.levels():
        raise ValueError(f"{q_level} is not a quantization level for n={cfg.n}, k={cfg.k}")
    gen = torch.Generator().manual_seed(seed)
    vs = torch.full((trials,), float(v), dtype=torch.float64)
    noise = _uniform(vs.shape, 2.0 ** (cfg.k - 2), gen, vs)
    hits = (quantize_levels(vs, noise, cfg.k, cfg.n) == q_level).double()
    p = hits.mean().item()
    return p, (p * (1 - p) / trials) ** 0.5


def bit_planes(x: torch.Tensor, plane_set, n: int = 8) -> torch.Tensor:
    """Rebuild [0, 1] pixels from the selected bit planes only (plane n-1 is the MSB)."""
    planes = sorted(set(plane_set))
    if any(j < 0 or j >= n for j in planes):
        raise ValueError(f"bit indices must lie in [0, {n})")
    vmax = 2 ** n - 1
    v = torch.round(x * vmax).to(torch.int64)
    mask = sum(1 << j for j in planes)
    return (v & mask).to(x.dtype) / vmax
