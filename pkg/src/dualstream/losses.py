"""The three training losses and their weighted composition.

``loss_c`` and ``loss_t`` are the normalized mean-squared-error (equivalently
2 - 2 cos) dissimilarity between the online and momentum outputs of each
stream. ``loss_att`` pulls the CNN-stream outputs toward the (stop-gradient)
transformer-stream outputs. The total is l_c + l_t + lambda * l_att.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateVectorError, DimensionError
from .tensor import (
    NORM_EPS,
    Tensor,
    add,
    mul,
    rowwise_l2norm,
    sub,
    tmean,
    tsum,
)


@dataclass
class StreamOutputs:
    """f1/f2: CNN stream online/momentum; f3/f4: transformer stream ditto."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.f1, self.f2, self.f3, self.f4)}
        if len(shapes) != 1:
            raise DimensionError(f"stream outputs disagree in shape: {shapes}")


@dataclass
class LossBreakdown:
    l_c: float
    l_t: float
    l_att: float
    l_total: float
    lam: float

    total_tensor: Tensor | None = None


def cosine_dissimilarity(a: Tensor, b: Tensor) -> Tensor:
    """Batch mean of 2 - 2 <a_i, b_i> / (|a_i| |b_i|)."""
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"expected matching (B,D) inputs, got {a.shape}, {b.shape}")
    na = rowwise_l2norm(a)
    nb = rowwise_l2norm(b)
    if np.any(na.data < NORM_EPS) or np.any(nb.data < NORM_EPS):
        raise DegenerateVectorError("cosine loss over a zero-norm row")
    dot = tsum(mul(a, b), axis=1)
    return tmean(sub(2.0, mul(2.0, dot / (na * nb))))


def loss_c(f1: Tensor, f2: Tensor) -> Tensor:
    return cosine_dissimilarity(f1, f2)


def loss_t(f3: Tensor, f4: Tensor) -> Tensor:
    return cosine_dissimilarity(f3, f4)


def loss_att(f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor,
             normalize: bool = False) -> Tensor:
    """Batch mean of |f1 - sg(f3)| + |f2 - f4|.

    f3 enters through a stop-gradient so this term never trains the
    transformer; f2 and f4 come from momentum branches and carry no gradient,
    so only f1 receives one. ``normalize`` optionally l2-normalizes each
    operand row first.
    """
    shapes = {f1.shape, f2.shape, f3.shape, f4.shape}
    if len(shapes) != 1:
        raise DimensionError(f"loss_att inputs disagree in shape: {shapes}")
    if normalize:
        from .tensor import l2_normalize

        f1, f2, f3, f4 = (l2_normalize(f) for f in (f1, f2, f3, f4))
    d13 = rowwise_l2norm(sub(f1, f3.detach()))
    d24 = rowwise_l2norm(sub(f2, f4))
    return tmean(add(d13, d24))


def loss_total(outputs: StreamOutputs, lam: float = 100.0,
               normalize_att: bool = False) -> LossBreakdown:
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    lc = loss_c(outputs.f1, outputs.f2)
    lt = loss_t(outputs.f3, outputs.f4)
    latt = loss_att(outputs.f1, outputs.f2, outputs.f3, outputs.f4,
                    normalize=normalize_att)
    total = add(add(lc, lt), mul(float(lam), latt))
    return LossBreakdown(
        l_c=lc.item(), l_t=lt.item(), l_att=latt.item(),
        l_total=total.item(), lam=float(lam), total_tensor=total,
    )


def combine_breakdowns(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown:
    """Average two breakdowns (used by the symmetrized objective)."""
    total = mul(0.5, add(a.total_tensor, b.total_tensor))
    return LossBreakdown(
        l_c=0.5 * (a.l_c + b.l_c),
        l_t=0.5 * (a.l_t + b.l_t),
        l_att=0.5 * (a.l_att + b.l_att),
        l_total=total.item(),
        lam=a.lam,
        total_tensor=total,
    )
