"""How densely each supervision signal reaches the image features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TwoStageDetector
from .scene_sim import SceneFrame


@dataclass
class DensityResult:
    pers: float
    bev: float
    locations: int


def _nonzero_fraction(grad: np.ndarray | None) -> float:
    """Share of [view, row, col] locations whose gradient is nonzero in any channel."""
    if grad is None:
        return 0.0
    hit = np.any(grad != 0, axis=1)
    return float(hit.mean())


def gradient_density(model: TwoStageDetector, frame: SceneFrame, level: int = 0) -> DensityResult:
    """Fraction of feature locations (stride 8 at ``level`` 0) touched by dL_pers and by dL_bev.

    Each loss gets its own forward pass so the two gradients never mix.
    """
    fracs = []
    for which in ("pers", "bev"):
        model.zero_grad()
        res = model(frame)
        l_bev, l_pers, _ = model.loss_terms(frame, res)
        feat = res.pyramid.levels[level]
        (l_pers if which == "pers" else l_bev).backward()
        fracs.append(_nonzero_fraction(feat.grad))
    model.zero_grad()
    n = int(np.prod(np.asarray(res.pyramid.levels[level].shape)[[0, 2, 3]]))
    return DensityResult(fracs[0], fracs[1], n)
