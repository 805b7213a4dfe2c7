"""Text instance feature assembling: sum-pool the pixel embedding under each mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class InstanceFeatures:
    F: Tensor            # [N, D]
    valid: np.ndarray    # [N] bool


def assemble_features(masks: np.ndarray, valid, P: Tensor) -> InstanceFeatures:
    """F = M . P^T with masks flattened to [N, H'W'] and P to [D, H'W'].

    Soft masks are binarized at 0.5 first; padded slots contribute zero rows.
    """
    m = np.asarray(masks)
    d, h, w = P.shape
    if m.shape[1:] != (h, w):
        raise ValueError(f"mask resolution {m.shape[1:]} does not match pixel embedding {(h, w)}")
    valid = np.asarray(valid, dtype=bool)
    hard = (m > 0.5).astype(np.float64) * valid[:, None, None]
    flat = Tensor(hard.reshape(len(hard), h * w))
    F = nx.matmul(flat, nx.transpose(nx.reshape(P, (d, h * w))))
    return InstanceFeatures(F, valid)
