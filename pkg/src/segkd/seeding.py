"""Deterministic seed derivation.

One master seed drives every stochastic choice in the package. Sub-seeds are
derived with ``numpy.random.SeedSequence([master, *context])``, which is a
documented, stable hash; nothing consumes the global torch/numpy RNGs, so two
runs with the same config are bit-identical regardless of interpreter state.

Stage codes (used by the CLI to give each pipeline stage its own stream):

    gen-synthetic    1
    cache-embeddings 2
    distill-encoder  3
    finetune-decoder 4
    evaluate         5
"""

from __future__ import annotations

import numpy as np
import torch

STAGE_CODES = {
    "gen-synthetic": 1,
    "cache-embeddings": 2,
    "distill-encoder": 3,
    "finetune-decoder": 4,
    "evaluate": 5,
}


def derive_seed(*parts: int) -> int:
    """Collapse an integer context tuple into one 32-bit seed."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def stage_seed(master_seed: int, stage: str) -> int:
    return derive_seed(master_seed, STAGE_CODES[stage])


def torch_generator(*parts: int) -> torch.Generator:
    """CPU generator seeded from a derived seed."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen
