"""Weight initialization schemes, including the MLP mean-shift initializers.

The mean-shift schemes touch only the first projection ``W1`` of each MLP
block. Base weights are drawn from one RNG stream and the mean offsets from a
separate one, so two models that differ only in the MLP mean mode share every
other initial value bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.stats import truncnorm

from .autodiff import ShapeError

if TYPE_CHECKING:
    from .models import TinyModel

BASE_SCHEMES = ("kaiming_uniform", "trunc_normal")
MEAN_MODES = ("none", "constant", "rowvec")
BIAS_INITS = ("zero", "constant")

# PyTorch's nn.Linear / nn.Conv2d default: kaiming_uniform_(a=sqrt(5)), i.e. bound = 1/sqrt(fan_in)
DEFAULT_KAIMING_GAIN = math.sqrt(1.0 / 3.0)
TRUNC_STD = 0.02


@dataclass(frozen=True)
class InitSpec:
    base: str = "kaiming_uniform"
    kaiming_gain: float = DEFAULT_KAIMING_GAIN
    trunc_std: float = TRUNC_STD
    mlp_mean_mode: str = "none"
    mlp_mean_value: float = 0.0  # b for "constant", sigma_b (a std) for "rowvec"
    anticorrelate_w1_w2: bool = False
    linear_bias_init: str = "zero"
    linear_bias_value: float = 0.0
    learnable_scalar_bias: bool = False
    scalar_bias_init: float = 0.0
    rng_seed: int | None = None

    def __post_init__(self):
        if self.base not in BASE_SCHEMES:
            raise ValueError(f"base must be one of {BASE_SCHEMES}, got {self.base!r}")
        if self.mlp_mean_mode not in MEAN_MODES:
            raise ValueError(f"mlp_mean_mode must be one of {MEAN_MODES}, got {self.mlp_mean_mode!r}")
        if self.linear_bias_init not in BIAS_INITS:
            raise ValueError(f"linear_bias_init must be one of {BIAS_INITS}, got {self.linear_bias_init!r}")
        for field in ("mlp_mean_value", "linear_bias_value", "scalar_bias_init", "kaiming_gain", "trunc_std"):
            if not math.isfinite(getattr(self, field)):
                raise ValueError(f"{field} must be finite")
        if self.mlp_mean_mode == "rowvec" and self.mlp_mean_value < 0:
            raise ValueError("rowvec sigma_b must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InitSpec":
        return cls(**d)

    @classmethod
    def parse_mode(cls, text: str, **kwargs) -> "InitSpec":
        """Parse the command-line form ``none | constant:B | rowvec:S | anticorr``."""
        kind, _, arg = text.partition(":")
        if kind == "none":
            return cls(**kwargs)
        if kind == "constant":
            return cls(mlp_mean_mode="constant", mlp_mean_value=float(arg), **kwargs)
        if kind == "rowvec":
            return cls(mlp_mean_mode="rowvec", mlp_mean_value=float(arg) if arg else 0.02, **kwargs)
        if kind == "anticorr":
            return cls(anticorrelate_w1_w2=True, **kwargs)
        raise ValueError(f"unknown init mode {text!r}; expected none|constant:B|rowvec:S|anticorr")


def kaiming_uniform_bound(fan_in: int, gain: float = DEFAULT_KAIMING_GAIN) -> float:
    return gain * math.sqrt(3.0 / fan_in)


def base_init(shape: tuple[int, ...], spec: InitSpec, rng: np.random.Generator,
              fan_in: int | None = None) -> np.ndarray:
    """Draw a weight array with the base scheme.

    ``fan_in`` defaults to the product of all but the first dimension, which is
    the input width for ``[out, in]`` matrices and ``f*f`` for depthwise kernels.
    """
    shape = tuple(shape)
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    if spec.base == "kaiming_uniform":
        bound = kaiming_uniform_bound(fan_in, spec.kaiming_gain)
        return rng.uniform(-bound, bound, size=shape)
    return spec.trunc_std * truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)


def apply_constant_mean(W1: np.ndarray, b: float) -> np.ndarray:
    """``W1 + b * 1_p 1_n^T``: shift every entry by the same constant."""
    return np.asarray(W1, dtype=np.float64) + float(b)


def apply_rowvec_mean(W1: np.ndarray, sigma_b: float, rng: np.random.Generator | None = None,
                      offset: np.ndarray | None = None) -> np.ndarray:
    """``W1 + 1_p b_n^T`` with ``b_n ~ N(0, sigma_b^2 I_n)`` shared by every row.

    Pass ``offset`` to inject ``b_n`` directly instead of drawing it.
    """
    W1 = np.asarray(W1, dtype=np.float64)
    if sigma_b < 0:
        raise ValueError("sigma_b must be >= 0")
    n = W1.shape[1]
    if offset is None:
        if rng is None:
            raise ValueError("apply_rowvec_mean needs an rng or an explicit offset")
        offset = sigma_b * rng.standard_normal(n)
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (n,):
        raise ShapeError(f"row offset must have shape ({n},), got {offset.shape}")
    return W1 + offset[None, :]


def apply_anticorrelated(W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
    """``(W1 - W2^T) / 2``; ``W2`` is ``[n, p]`` so it is transposed to line up with ``W1``."""
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    if W2.shape != W1.shape[::-1]:
        raise ShapeError(f"anticorrelated init needs W2 shaped {W1.shape[::-1]}, got {W2.shape}")
    return 0.5 * (W1 - W2.T)


def _weight_fan_in(name: str, shape: tuple[int, ...]) -> int | None:
    if name.endswith(".K"):
        return shape[1] * shape[2]
    return None


def initialize_model(model: "TinyModel", spec: InitSpec, init_rng: np.random.Generator,
                     mean_rng: np.random.Generator) -> None:
    """Initialize every parameter of ``model`` in registration order.

    Weight matrices and conv kernels get the base scheme; norms start at
    identity; biases, position embeddings and the classifier head start at
    zero. MLP ``W1`` tensors then receive the mean shift and, optionally, the
    anticorrelation transform. ``b1`` follows ``linear_bias_init``.
    """
    for name, p in model.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head."):
            p.assign(np.zeros(p.shape))
        elif leaf == "gamma":
            p.assign(np.ones(p.shape))
        elif leaf == "scalar_bias":
            p.assign(np.array(spec.scalar_bias_init))
        elif p.ndim >= 2 and name != "pos":
            p.assign(base_init(p.shape, spec, init_rng, _weight_fan_in(name, p.shape)))
        else:
            p.assign(np.zeros(p.shape))

    for block in model.mlp_blocks():
        W1 = block.W1.numpy()
        if spec.mlp_mean_mode == "constant":
            W1 = apply_constant_mean(W1, spec.mlp_mean_value)
        elif spec.mlp_mean_mode == "rowvec":
            W1 = apply_rowvec_mean(W1, spec.mlp_mean_value, mean_rng)
        if spec.anticorrelate_w1_w2:
            W1 = apply_anticorrelated(W1, block.W2.numpy())
        block.W1.assign(W1)
        if spec.linear_bias_init == "constant":
            block.b1.assign(np.full(block.b1.shape, spec.linear_bias_value))
