"""Micro-CNN configuration and parameter records."""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator


class ConvBlock(BaseModel):
    """Convolution (stride 1, same padding) + ReLU + 2×2 max-pool."""

    kernel: int = 3
    channels: int = Field(gt=0)

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {v}")
        return v


def _default_blocks() -> list[ConvBlock]:
    return [ConvBlock(kernel=3, channels=c) for c in (8, 16, 32, 32, 64, 64)]


class NetworkConfig(BaseModel):
    """Layer stack description.

    Layers are numbered from 1: conv blocks first, then the fully connected
    layers. ``dropout`` maps a layer number to its drop probability, applied
    to that layer's output during training.
    """

    input_size: int = Field(default=256, gt=0)
    input_channels: int = Field(default=1, gt=0)
    conv_blocks: list[ConvBlock] = Field(default_factory=_default_blocks)
    fc_sizes: list[int] = Field(default_factory=lambda: [256, 64])
    n_classes: Literal[2] = 2
    dropout: dict[int, float] = Field(default_factory=lambda: {6: 0.75, 7: 0.75})
    loss: Literal["mse", "xent"] = "mse"

    @model_validator(mode="after")
    def _check_dropout(self) -> "NetworkConfig":
        n_hidden = len(self.conv_blocks) + len(self.fc_sizes)
        for layer, p in self.dropout.items():
            if not 1 <= layer <= n_hidden:
                raise ValueError(f"dropout layer {layer} outside hidden layers 1..{n_hidden}")
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout probability for layer {layer} must be in [0, 1)")
        return self

    @property
    def final_spatial(self) -> int:
        size = self.input_size
        for _ in self.conv_blocks:
            size //= 2
        return size


class TrainConfig(BaseModel):
    batch_size: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=0.01, ge=0)
    iterations: int = Field(default=1000, ge=0)
    seed: int = 0
    shuffle: bool = True


@dataclass
class Network:
    """Configuration plus named float64 parameter tensors in declaration order."""

    config: NetworkConfig
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Network":
        return Network(config=self.config.model_copy(deep=True),
                       params={k: v.copy() for k, v in self.params.items()})
