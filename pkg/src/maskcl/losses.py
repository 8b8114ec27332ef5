"""Contrastive losses: prototypical, cross-view, and weighted neighbor terms.

All losses are implemented with torch ops so analytic gradients flow to any
tensor argument that carries one; plain floats and numpy arrays are accepted
for hand evaluation and converted on the way in. Posteriors are computed in
double precision and every logarithm is floored at LOG_FLOOR to keep the
losses finite when posterior mass underflows at low temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .structure import NeighborDraw

LOG_FLOOR = 1e-12


def _as_tensor(v) -> torch.Tensor:
    return v if isinstance(v, torch.Tensor) else torch.as_tensor(np.asarray(v, dtype=np.float64))


def _scalar_out(out: torch.Tensor, *inputs):
    if any(isinstance(i, torch.Tensor) for i in inputs):
        return out
    return float(out)


@dataclass
class PosteriorVector:
    """Probability vector over the m clusters for one instance and view."""

    q: torch.Tensor
    tau: float

    def __post_init__(self) -> None:
        if self.q.ndim != 1 or self.q.shape[0] < 1:
            raise ValueError(f"posterior must be a length-m vector, got shape {tuple(self.q.shape)}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        probe = self.q.detach()
        if float(probe.min()) <= 0:
            raise ValueError("posterior entries must be positive")
        total = float(probe.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"posterior entries sum to {total}, expected 1 within 1e-6")


def posterior(prototypes, feat, tau: float) -> PosteriorVector:
    """Temperature softmax of prototype-feature dot products.

    Computed in double precision with max-subtraction; entries are floored at
    LOG_FLOOR so downstream logarithms stay finite.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    protos = _as_tensor(prototypes).double()
    f = _as_tensor(feat).double()
    if protos.ndim != 2 or protos.shape[0] < 1:
        raise ValueError(f"prototypes must be m x D with m >= 1, got shape {tuple(protos.shape)}")
    if f.ndim != 1 or f.shape[0] != protos.shape[1]:
        raise ValueError(f"feature shape {tuple(f.shape)} does not match prototype dim {protos.shape[1]}")
    scores = protos @ f / tau
    q = torch.softmax(scores - scores.max().detach(), dim=0)
    return PosteriorVector(q=q.clamp(min=LOG_FLOOR), tau=float(tau))


def _focal_log(q: torch.Tensor) -> torch.Tensor:
    qc = q.clamp(min=LOG_FLOOR, max=1.0)
    return (1.0 - qc) ** 2 * torch.log(qc)


def loss_prototypical(q_i, q_tilde_i, q_hat_i):
    """Focal-modulated negative log posterior mass on the instance's own cluster,
    summed over the RGB, mask, and fused views. Zero iff all three masses are 1."""
    args = (q_i, q_tilde_i, q_hat_i)
    out = -(_focal_log(_as_tensor(q_i)) + _focal_log(_as_tensor(q_tilde_i)) + _focal_log(_as_tensor(q_hat_i)))
    return _scalar_out(out, *args)


def loss_crossview(z, x_tilde, p_tilde):
    """Negative cosine of the predictor output against the instance's mask
    feature and its mask-view cluster prototype.

    Gradient flows only through ``z``; the other two arguments are treated as
    constants.
    """
    args = (z, x_tilde, p_tilde)
    zt = _as_tensor(z).flatten()
    xt = _as_tensor(x_tilde).detach().flatten()
    pt = _as_tensor(p_tilde).detach().flatten()
    out = zt.new_zeros(())
    for other in (xt, pt):
        nz = torch.linalg.vector_norm(zt)
        no = torch.linalg.vector_norm(other)
        if float(nz.detach()) == 0 or float(no.detach()) == 0:
            raise ValueError("cross-view loss of a zero-norm vector is undefined")
        out = out - (zt @ other.to(zt.dtype)) / (nz * no)
    return _scalar_out(out, *args)


def loss_neighbor(draw: NeighborDraw, q_full: PosteriorVector, q_tilde_full: PosteriorVector):
    """Weighted sum of negative log posterior mass on each sampled neighbor
    cluster, for both the RGB and mask views. Zero for an empty draw."""
    q = q_full.q
    qt = q_tilde_full.q
    out = q.new_zeros(())
    for j, w in draw.drawn:
        if not 0 <= j < q.shape[0]:
            raise IndexError(f"neighbor cluster {j} outside posterior of length {q.shape[0]}")
        out = out - w * (torch.log(q[j].clamp(min=LOG_FLOOR)) + torch.log(qt[j].clamp(min=LOG_FLOOR)))
    return out


def loss_total(l_p, l_c, l_n):
    """Unweighted sum of the three terms; raises naming any non-finite part."""
    parts = {"l_p": l_p, "l_c": l_c, "l_n": l_n}
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise ValueError(f"loss component {name} is not finite: {v}")
    return l_p + l_c + l_n


@dataclass
class LossBreakdown:
    l_p: float
    l_c: float
    l_n: float
    total: float

    @classmethod
    def from_parts(cls, l_p, l_c, l_n) -> "LossBreakdown":
        total = loss_total(l_p, l_c, l_n)
        return cls(l_p=float(l_p), l_c=float(l_c), l_n=float(l_n), total=float(total))
