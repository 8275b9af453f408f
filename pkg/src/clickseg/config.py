"""Hyper-parameter container shared across the toolkit.

Defaults follow the standard configuration used throughout the test suite
and benchmarks; everything is overridable from a JSON config file.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class LossWeights:
    """Weights and margins of the embedding training objective."""

    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    lambda_reg: float = 1e-4
    eps_intra: float = 0.25
    eps_inter: float = 0.75

    def __post_init__(self):
        if min(self.lambda_intra, self.lambda_inter, self.lambda_reg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps_intra < 0 or self.eps_inter < 0:
            raise ValueError("margins must be non-negative")
        if not self.eps_inter > self.eps_intra:
            warnings.warn(
                "inter-cluster margin should exceed intra-cluster margin "
                f"(got eps_inter={self.eps_inter} <= eps_intra={self.eps_intra})",
                stacklevel=2,
            )


@dataclass(frozen=True)
class Hyperparams:
    """All tunables in one place; JSON round-trippable."""

    loss: LossWeights = dataclasses.field(default_factory=LossWeights)
    click_radius: float = 0.35          # default positive-click radius alpha
    smooth_gamma: float = 0.7           # neighbor-fraction threshold for smoothing
    graph_degree: int = 3               # kNN degree of the outlier-removal graph
    smooth_iters: int = 5               # smoothing rounds
    smooth_neighbors: int = 32          # neighborhood size for smoothing
    embed_dim: int = 64
    learning_rate: float = 1e-3
    epochs: int = 1000
    finetune_steps: int = 10
    finetune_step_size: float = 1e-3
    finetune_on_negative: bool = False  # auto fine-tune whenever a negative lands

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Hyperparams":
        raw = json.loads(text)
        loss = LossWeights(**raw.pop("loss", {}))
        return cls(loss=loss, **raw)

    @classmethod
    def load(cls, path: str | Path) -> "Hyperparams":
        return cls.from_json(Path(path).read_text())
