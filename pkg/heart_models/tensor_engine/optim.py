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

"""AdamW with decoupled weight decay and the warmup + cosine schedule."""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from heart_models.errors import ConfigError, ConformanceError
from heart_models.tensor_engine.graph import Tensor, parameter


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: OptimState,
    lr: Optional[float] = None,
) -> Tuple[Dict[str, Tensor], OptimState]:
    """One AdamW update. Returns fresh parameter tensors and the advanced state.

    Decay is applied first, ``θ ← θ·(1 − lr·λ)``, then the bias-corrected
    moment update. Parameters without a gradient entry are treated as having
    a zero gradient.
    """
    lr = state.lr if lr is None else float(lr)
    if lr <= 0:
        raise ConfigError(f"Learning rate must be positive, got {lr}.")
    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step

    new_params: Dict[str, Tensor] = {}
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        theta = param.data.astype(np.float64)
        grad = grads.get(name)
        grad = np.zeros_like(theta) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != theta.shape:
            raise ConformanceError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {theta.shape}.")
        m = state.first_moment.get(name, np.zeros_like(theta)).astype(np.float64)
        v = state.second_moment.get(name, np.zeros_like(theta)).astype(np.float64)
        if m.shape != theta.shape or v.shape != theta.shape:
            raise ConformanceError(f"Optimizer moments for '{name}' do not match the parameter shape {theta.shape}.")

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        theta = theta * (1.0 - lr * state.weight_decay)
        theta = theta - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

        new_params[name] = parameter(theta, name=name)
        first[name] = m.astype(param.data.dtype)
        second[name] = v.astype(param.data.dtype)

    new_state = OptimState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
        step=step,
        first_moment=first,
        second_moment=second,
    )
    return new_params, new_state


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float, warmup_steps: int) -> float:
    """Linear warmup 0 → lr_max, then cosine decay to lr_min at ``total_steps``."""
    if total_steps <= 0 or not 0 <= warmup_steps < total_steps:
        raise ConfigError(f"Need 0 <= warmup_steps < total_steps, got {warmup_steps} and {total_steps}.")
    step = min(max(int(step), 0), total_steps)
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    tau = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * tau)) / 2.0


def default_warmup(total_steps: int, fraction: float = 0.05) -> int:
    return min(int(total_steps * fraction), max(total_steps - 1, 0))
