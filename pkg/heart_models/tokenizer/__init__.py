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

from heart_models.tokenizer.tokenizer import (
    INDEX_COLUMNS,
    KeptTokens,
    MaskPlan,
    PlaneStack,
    TokenBatch,
    apply_mask,
    drop_planes,
    full_plan,
    mask_seed,
    normalize_stack,
    patchify,
    positional_embedding,
    positional_embeddings,
    sample_mask,
    select_views,
    unpatchify,
)

__all__ = [
    "INDEX_COLUMNS",
    "KeptTokens",
    "MaskPlan",
    "PlaneStack",
    "TokenBatch",
    "apply_mask",
    "drop_planes",
    "full_plan",
    "mask_seed",
    "normalize_stack",
    "patchify",
    "positional_embedding",
    "positional_embeddings",
    "sample_mask",
    "select_views",
    "unpatchify",
]
