from __future__ import annotations

from dataclasses import asdict, dataclass, replace


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ThVaeConfig:
    """Architecture and optimisation settings.

    Defaults follow the reference setup: 5 latent layers of width 768 (the
    word-embedding size), 3 cells per block, 1 cell per group, 6 transformer
    decoder layers and Adam at 5e-4.  ``pooled_length``, ``conv_mul_kernels``
    and ``kl_warmup_steps`` are our own choices.
    """

    num_latents: int = 5
    latent_dim: int = 768
    embedding_dim: int = 768
    cells_per_block: int = 3
    cells_per_group: int = 1
    decoder_layers: int = 6
    decoder_heads: int = 12
    pooled_length: int = 32
    conv_kernel: int = 3
    conv_mul_kernels: tuple[int, ...] = (3, 5, 7)
    se_reduction: int = 16
    learning_rate: float = 5e-4
    kl_warmup_steps: int = 2000
    max_segment_tokens: int = 320
    max_decode_tokens: int = 512
    dropout: float = 0.1
    batch_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "conv_mul_kernels", tuple(self.conv_mul_kernels))
        if self.num_latents < 1:
            raise ConfigurationError("num_latents must be >= 1")
        if self.latent_dim != self.embedding_dim:
            raise ConfigurationError("latent_dim must equal embedding_dim")
        if self.latent_dim % self.decoder_heads:
            raise ConfigurationError("latent_dim must be divisible by decoder_heads")
        kernels = (self.conv_kernel, *self.conv_mul_kernels)
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ConfigurationError(f"convolution kernels must be odd, got {kernels}")
        if not self.conv_mul_kernels:
            raise ConfigurationError("conv_mul_kernels must not be empty")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.kl_warmup_steps < 0:
            raise ConfigurationError("kl_warmup_steps must be >= 0")
        for name in ("cells_per_block", "cells_per_group", "decoder_layers", "pooled_length",
                     "max_segment_tokens", "max_decode_tokens", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @classmethod
    def micro(cls, **overrides) -> "ThVaeConfig":
        """Tiny configuration for tests and desk-scale runs."""
        base = dict(num_latents=2, latent_dim=8, embedding_dim=8, decoder_layers=1,
                    decoder_heads=2, pooled_length=4, max_segment_tokens=64,
                    max_decode_tokens=64, dropout=0.0, batch_size=10)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_mul_kernels"] = list(self.conv_mul_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThVaeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown ThVaeConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ThVaeConfig":
        return replace(self, **changes)

