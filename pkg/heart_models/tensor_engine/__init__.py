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

from heart_models.tensor_engine.gradcheck import check_gradients
from heart_models.tensor_engine.graph import (
    Graph,
    Node,
    Tensor,
    backward,
    constant,
    current_dtype,
    debug_checks,
    debug_enabled,
    parameter,
    use_dtype,
)
from heart_models.tensor_engine.ops import (
    add,
    concat,
    div,
    gather_rows,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mean_rows,
    mse,
    mul,
    reduce_sum,
    reshape,
    scale,
    scatter_rows,
    slice_axis,
    softmax,
)
from heart_models.tensor_engine.optim import OptimState, adamw_step, cosine_lr, default_warmup

__all__ = [
    "Graph",
    "Node",
    "OptimState",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "check_gradients",
    "concat",
    "constant",
    "cosine_lr",
    "current_dtype",
    "debug_checks",
    "debug_enabled",
    "default_warmup",
    "div",
    "gather_rows",
    "gelu",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean_rows",
    "mse",
    "mul",
    "parameter",
    "reduce_sum",
    "reshape",
    "scale",
    "scatter_rows",
    "slice_axis",
    "softmax",
    "use_dtype",
]
