#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heart_models.errors import ConformanceError, NumericError
from heart_models.tensor_engine import (
    Graph,
    concat,
    constant,
    div,
    gather_rows,
    layer_norm,
    matmul,
    parameter,
    scatter_rows,
    slice_axis,
    softmax,
    use_dtype,
)


def _triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_returns_operand(rng):
    a = rng.normal(size=(3, 3)).astype(np.float32)
    result = matmul(np.eye(3), a)
    np.testing.assert_array_equal(result.data, a)


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 6))
    result = matmul(a, b)
    np.testing.assert_allclose(result.data, _triple_loop(a, b), atol=1e-6)


@st.composite
def matmul_operands(draw):
    m, k, n = (draw(st.integers(1, 8)) for _ in range(3))
    elements = st.floats(-2, 2)
    return draw(arrays(np.float64, (m, k), elements=elements)), draw(arrays(np.float64, (k, n), elements=elements))


@settings(max_examples=25, deadline=None)
@given(matmul_operands())
def test_matmul_oracle_on_small_extents(operands):
    a, b = operands
    with use_dtype(np.float64):
        np.testing.assert_allclose(matmul(a, b).data, _triple_loop(a, b), atol=1e-6)


def test_matmul_inner_dimension_mismatch_is_conformance_error():
    with pytest.raises(ConformanceError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_softmax_of_zero_and_log_three():
    result = softmax(np.array([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(result.data, [[0.25, 0.75]], atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-20, 20)),
    st.floats(-50, 50),
)
def test_softmax_rows_sum_to_one_and_ignore_shifts(z, c):
    with use_dtype(np.float64):
        y = softmax(z).data
        shifted = softmax(z + c).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-5)
    np.testing.assert_allclose(y, shifted, atol=1e-6)


def test_softmax_invalid_axis_is_conformance_error():
    with pytest.raises(ConformanceError):
        softmax(np.zeros((2, 2)), axis=2)


def test_layer_norm_rows_are_standardized_before_affine(rng):
    x = rng.normal(3.0, 5.0, size=(6, 16))
    with use_dtype(np.float64):
        y = layer_norm(x, np.ones(16), np.zeros(16)).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-5)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-4)


def test_gather_and_scatter_rows_move_rows(rng):
    x = rng.normal(size=(4, 3))
    with use_dtype(np.float64):
        gathered = gather_rows(x, [2, 0, 2]).data
        scattered = scatter_rows(x[:2], [3, 1], 5).data
    np.testing.assert_array_equal(gathered, x[[2, 0, 2]])
    np.testing.assert_array_equal(scattered[[3, 1]], x[:2])
    np.testing.assert_array_equal(scattered[[0, 2, 4]], 0.0)


def test_scatter_rows_rejects_duplicate_indices():
    with pytest.raises(ConformanceError):
        scatter_rows(np.ones((2, 2)), [1, 1], 3)


def test_gather_rows_out_of_range_is_conformance_error():
    with pytest.raises(ConformanceError):
        gather_rows(np.ones((2, 2)), [2])


def test_concat_and_slice_are_inverse(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    with use_dtype(np.float64):
        joined = concat([a, b], axis=1)
        np.testing.assert_array_equal(slice_axis(joined, 3, 7, axis=1).data, b)
    with pytest.raises(ConformanceError):
        concat([a, np.ones((3, 3))], axis=1)


def test_ops_record_only_when_an_input_requires_grad():
    with Graph() as graph:
        matmul(constant(np.ones((2, 2))), constant(np.ones((2, 2))))
        assert len(graph) == 0
        matmul(parameter(np.ones((2, 2))), constant(np.ones((2, 2))))
    assert len(graph) == 1


def test_non_finite_output_names_the_op():
    with pytest.raises(NumericError, match="div"):
        div(np.ones(2), np.zeros(2))
