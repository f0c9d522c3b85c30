"""Model sizing and task selection."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass


class TaskMode(enum.Enum):
    """Which stream is being generated; masking/shifting follows from this."""

    CONTROLLED_TRACE = "trace"
    CONTROLLED_CAPTION = "caption"
    JOINT = "joint"


@dataclass(frozen=True)
class ModelConfig:
    """Network shape. Defaults are the full-scale profile (hidden 512,
    feed-forward 2048, generation capped at 100); desk() is the small
    profile used by the test suite and the synthetic-data runs."""

    vocab_size: int
    d_visual: int
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 1
    d_ffn: int = 2048
    max_len: int = 100

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the four special tokens")
        if self.d_visual < 1:
            raise ValueError("d_visual must be >= 1")

    @classmethod
    def desk(cls, vocab_size: int, d_visual: int, max_len: int = 24, n_layers: int = 1) -> "ModelConfig":
        return cls(vocab_size=vocab_size, d_visual=d_visual, d_model=32, n_heads=4,
                   d_ffn=64, n_layers=n_layers, max_len=max_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)
