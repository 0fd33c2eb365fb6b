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

import logging
from typing import Callable, Dict

import numpy as np

from heart_models.tensor_engine.graph import Graph, Tensor, backward, parameter, use_dtype

logger = logging.getLogger(__name__)

LossFn = Callable[[Dict[str, Tensor]], Tensor]


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(
    loss_fn: LossFn,
    params: Dict[str, Tensor],
    step_scale: float = 1e-4,
    floor: float = 1e-5,
) -> Dict[str, float]:
    """Worst relative error per parameter between reverse-mode and central differences.

    ``loss_fn`` must rebuild the scalar loss from the given parameter map. The
    whole check runs in float64; the step for element θᵢ is
    ``step_scale·max(1, |θᵢ|)``. Gradients smaller than ``floor`` are compared
    on an absolute scale.

    The default step is tuned for float64 central differences;
    ``step_scale=1e-2`` gives the coarser step.
    """
    with use_dtype(np.float64):
        params64 = {name: parameter(p.data.astype(np.float64), name=name) for name, p in params.items()}
        with Graph() as graph:
            loss = loss_fn(params64)
        analytic = backward(graph, loss, wrt=list(params64.values()), allow_unused=True)

        worst: Dict[str, float] = {}
        for name, param in params64.items():
            base = param.data.astype(np.float64)
            numeric = np.zeros_like(base)
            for position in np.ndindex(base.shape):
                h = step_scale * max(1.0, abs(base[position]))
                values = []
                for sign in (1.0, -1.0):
                    shifted = base.copy()
                    shifted[position] += sign * h
                    trial = dict(params64)
                    trial[name] = parameter(shifted, name=name)
                    values.append(loss_fn(trial).item())
                numeric[position] = (values[0] - values[1]) / (2.0 * h)
            error = _relative_error(analytic[param], numeric, floor)
            worst[name] = float(error.max()) if error.size else 0.0
            logger.debug(f"Gradient check '{name}': worst relative error {worst[name]:.3e}")
    return worst
