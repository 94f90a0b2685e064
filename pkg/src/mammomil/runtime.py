"""Process-wide determinism switch."""

from __future__ import annotations

import os
import random

import numpy as np
import torch

_DETERMINISTIC = False


def set_deterministic(enabled: bool = True, seed: int | None = None) -> None:
    """Serialize all torch work on one thread and use deterministic kernels.

    In this mode bag aggregation also reduces in a canonical instance order,
    which makes MIL outputs exactly invariant to bag permutation.
    """
    global _DETERMINISTIC
    _DETERMINISTIC = bool(enabled)
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
    if seed is not None:
        seed_everything(seed)


def is_deterministic() -> bool:
    return _DETERMINISTIC


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
