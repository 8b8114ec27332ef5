"""Instance feature banks with exponential-moving-average updates.

Three banks are kept during training: one per branch (RGB, mask) and one for
the fused features. Rows stay L2-normalized; cluster prototypes are plain
means of rows and are consumed downstream through dot products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

_NORM_TOL = 1e-6


def _as_tensor(x, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if dtype is not None:
        t = t.to(dtype)
    return t


@dataclass
class FeatureBank:
    """N x D store of unit-norm instance features, row i <-> sample_id i."""

    entries: torch.Tensor
    alpha: float
    normalized: bool = True

    @classmethod
    def from_features(cls, features, alpha: float) -> "FeatureBank":
        feats = _as_tensor(features).clone().detach()
        if feats.ndim != 2:
            raise ValueError(f"features must be N x D, got shape {tuple(feats.shape)}")
        norms = torch.linalg.vector_norm(feats, dim=1)
        bad = torch.nonzero(norms == 0).flatten()
        if len(bad) > 0:
            raise ValueError(f"zero-norm feature row for sample_id {int(bad[0])}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return cls(entries=feats / norms[:, None], alpha=alpha)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def ema_update(self, sample_id: int, feat) -> None:
        """row <- normalize(alpha * row + (1 - alpha) * normalize(feat))."""
        if not 0 <= sample_id < len(self):
            raise IndexError(f"sample_id {sample_id} out of range [0, {len(self)})")
        f = _as_tensor(feat, dtype=self.entries.dtype).detach().flatten()
        if f.shape[0] != self.dim:
            raise ValueError(f"feature has dim {f.shape[0]}, bank stores dim {self.dim}")
        norm = torch.linalg.vector_norm(f)
        if norm == 0:
            raise ValueError(f"zero-norm feature for sample_id {sample_id}")
        if self.alpha == 1.0:
            return  # blend degenerates to the stored (already unit) row
        blended = self.alpha * self.entries[sample_id] + (1.0 - self.alpha) * (f / norm)
        self.entries[sample_id] = blended / torch.linalg.vector_norm(blended)

    def prototype(self, cluster: Iterable[int]) -> torch.Tensor:
        """Arithmetic mean of the cluster's rows (not re-normalized)."""
        ids = sorted(int(i) for i in cluster)
        if not ids:
            raise ValueError("prototype of an empty cluster is undefined")
        if ids[0] < 0 or ids[-1] >= len(self):
            raise IndexError(f"cluster ids outside [0, {len(self)})")
        return self.entries[ids].mean(dim=0)

    def state_dict(self) -> dict:
        return {"entries": self.entries, "alpha": self.alpha, "normalized": self.normalized}

    @classmethod
    def from_state(cls, state: dict) -> "FeatureBank":
        return cls(entries=state["entries"], alpha=float(state["alpha"]), normalized=bool(state["normalized"]))


@dataclass
class BankTriplet:
    m_rgb: FeatureBank
    m_mask: FeatureBank
    m_fused: FeatureBank

    def __post_init__(self) -> None:
        shapes = {tuple(b.entries.shape) for b in (self.m_rgb, self.m_mask, self.m_fused)}
        if len(shapes) != 1:
            raise ValueError(f"banks disagree on N x D: {shapes}")

    def __len__(self) -> int:
        return len(self.m_rgb)

    def state_dict(self) -> dict:
        return {
            "m_rgb": self.m_rgb.state_dict(),
            "m_mask": self.m_mask.state_dict(),
            "m_fused": self.m_fused.state_dict(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "BankTriplet":
        return cls(
            m_rgb=FeatureBank.from_state(state["m_rgb"]),
            m_mask=FeatureBank.from_state(state["m_mask"]),
            m_fused=FeatureBank.from_state(state["m_fused"]),
        )


def init_banks(x_all, x_tilde_all, alpha: float) -> BankTriplet:
    """RGB and fused banks start from the RGB features, mask bank from mask features."""
    x = _as_tensor(x_all)
    xt = _as_tensor(x_tilde_all)
    if x.shape != xt.shape:
        raise ValueError(f"feature matrices disagree: {tuple(x.shape)} vs {tuple(xt.shape)}")
    return BankTriplet(
        m_rgb=FeatureBank.from_features(x, alpha),
        m_mask=FeatureBank.from_features(xt, alpha),
        m_fused=FeatureBank.from_features(x, alpha),
    )
