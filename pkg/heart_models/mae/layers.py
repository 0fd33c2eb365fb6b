#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

"""Parameter initializers and functional transformer layers.

Parameters live in a flat ``{dotted.name: Tensor}`` map; every layer takes
the map and its name prefix.
"""

import math
from typing import Dict

import numpy as np
from scipy import stats

from heart_models.tensor_engine import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    parameter,
    scale,
    slice_axis,
    softmax,
)

Params = Dict[str, Tensor]

LN_EPS = 1e-6


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std²) truncated at ±2σ."""
    return stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng).astype(np.float32)


def init_linear(params: Params, rng: np.random.Generator, name: str, d_in: int, d_out: int, std: float = 0.02) -> None:
    params[f"{name}.weight"] = parameter(trunc_normal(rng, (d_in, d_out), std), name=f"{name}.weight")
    params[f"{name}.bias"] = parameter(np.zeros(d_out, dtype=np.float32), name=f"{name}.bias")


def init_layer_norm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.gamma"] = parameter(np.ones(dim, dtype=np.float32), name=f"{name}.gamma")
    params[f"{name}.beta"] = parameter(np.zeros(dim, dtype=np.float32), name=f"{name}.beta")


def init_block(params: Params, rng: np.random.Generator, prefix: str, dim: int, mlp_ratio: int, std: float = 0.02) -> None:
    init_layer_norm(params, f"{prefix}.norm1", dim)
    init_linear(params, rng, f"{prefix}.attn.qkv", dim, 3 * dim, std)
    init_linear(params, rng, f"{prefix}.attn.proj", dim, dim, std)
    init_layer_norm(params, f"{prefix}.norm2", dim)
    init_linear(params, rng, f"{prefix}.mlp.fc1", dim, mlp_ratio * dim, std)
    init_linear(params, rng, f"{prefix}.mlp.fc2", mlp_ratio * dim, dim, std)


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return add(matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def norm(x: Tensor, params: Params, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], eps=LN_EPS)


def attention(x: Tensor, params: Params, prefix: str, n_heads: int) -> Tensor:
    """Multi-head self-attention over all rows; heads are column blocks of one qkv projection."""
    dim = x.shape[1]
    head_dim = dim // n_heads
    qkv = linear(x, params, f"{prefix}.qkv")
    heads = []
    for h in range(n_heads):
        lo = h * head_dim
        q = slice_axis(qkv, lo, lo + head_dim, axis=1)
        k = slice_axis(qkv, dim + lo, dim + lo + head_dim, axis=1)
        v = slice_axis(qkv, 2 * dim + lo, 2 * dim + lo + head_dim, axis=1)
        weights = softmax(scale(matmul(q, k, transpose_b=True), 1.0 / math.sqrt(head_dim)), axis=-1)
        heads.append(matmul(weights, v))
    mixed = heads[0] if n_heads == 1 else concat(heads, axis=1)
    return linear(mixed, params, f"{prefix}.proj")


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    return linear(gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def transformer_block(x: Tensor, params: Params, prefix: str, n_heads: int) -> Tensor:
    """Pre-norm block: x + attn(norm(x)), then + mlp(norm(x))."""
    x = add(x, attention(norm(x, params, f"{prefix}.norm1"), params, f"{prefix}.attn", n_heads))
    return add(x, mlp(norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp"))
