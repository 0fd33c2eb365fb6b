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

# --- Custom Exceptions ---
# Exit codes follow the CLI contract: 2 config, 3 data, 4 numeric failure.


class HeartError(Exception):
    """Base exception for every failure raised by the library and the harness."""

    exit_code = 1


class ConfigError(HeartError):
    """Invalid configuration or an operation called with inconsistent settings."""

    exit_code = 2


class ConformanceError(ConfigError):
    """Operand shapes do not conform for a primitive op."""
    pass


class UsageError(ConfigError):
    """An API was used outside its contract (e.g. gradient for a tensor not on the graph)."""
    pass


class GenerationError(ConfigError):
    """Phantom geometry violates a constraint (self-intersection, radii, grid fit)."""
    pass


class DataError(HeartError):
    """Malformed, missing or inconsistent data on disk or in memory."""

    exit_code = 3


class ShapeError(DataError):
    """Array extents violate a divisibility or layout invariant."""
    pass


class IncompleteTokensError(DataError):
    """A token batch is missing indices required to rebuild the planes."""

    def __init__(self, message: str, gaps=None):
        super().__init__(message)
        self.gaps = list(gaps or [])


class PlanMismatchError(DataError):
    """A mask plan does not match the token batch it is applied to."""
    pass


class ContainerFormatError(DataError):
    """A container or checkpoint file has an unknown magic, version or length."""
    pass


class NumericError(HeartError):
    """A non-finite value appeared in a computation or a training loss."""

    exit_code = 4
