"""Training objectives: similarity metrics and the transfer losses.

Feature sequences are lists of [B, D] tensors, one per timestep; labels
are integer arrays of length B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEGENERACY_EPS = 1e-12


class DegenerateBatch(ValueError):
    pass


class DegenerateFeatures(ValueError):
    pass


@dataclass
class EtaParams:
    """Learnable per-timestep mixing coefficients, sigmoid-squashed in use."""
    eta: Tensor

    @classmethod
    def zeros(cls, timesteps: int) -> "EtaParams":
        return cls(eta=Tensor(np.zeros(timesteps), requires_grad=True))

    def sigmoid_values(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.eta.data))


@dataclass
class LossWeights:
    lambda_cls_s: float = 1.0
    lambda_kt: float = 0.5
    tet_lambda: float = 0.05
    tet_phi: float = 0.5


def gram_linear(x: Tensor) -> Tensor:
    """Linear-kernel Gram matrix X X^T of row features [B, D]."""
    if x.data.ndim != 2:
        raise ad.ShapeMismatch(f"gram_linear expects [B, D], got {x.data.shape}")
    if x.data.shape[0] < 2:
        raise DegenerateBatch(f"need a batch of >= 2 rows, got {x.data.shape[0]}")

    def bwd(out: Tensor) -> None:
        g = out.grad
        ad.accumulate(x, (g + g.T) @ x.data)

    return ad.make_op(x.data @ x.data.T, (x,), bwd)


def hsic(k: Tensor, l: Tensor) -> Tensor:
    """tr(K J L J) / (n-1)^2 with the centering matrix J = I - 11^T/n."""
    if k.data.shape != l.data.shape or k.data.ndim != 2 or k.data.shape[0] != k.data.shape[1]:
        raise ad.ShapeMismatch(f"hsic: {k.data.shape} vs {l.data.shape}")
    n = k.data.shape[0]
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    denom = (n - 1) ** 2
    val = np.trace(k.data @ j @ l.data @ j) / denom

    def bwd(out: Tensor) -> None:
        # d tr(KJLJ)/dK = J L^T J; both inputs are symmetric by precondition
        ad.accumulate(k, out.grad * (j @ l.data.T @ j) / denom)
        ad.accumulate(l, out.grad * (j @ k.data.T @ j) / denom)

    return ad.make_op(np.asarray(val), (k, l), bwd)


def cka(k: Tensor, l: Tensor) -> Tensor:
    """Normalized HSIC similarity; in [0, 1] for Gram inputs."""
    kk = hsic(k, k)
    ll = hsic(l, l)
    if kk.item() <= DEGENERACY_EPS or ll.item() <= DEGENERACY_EPS:
        raise DegenerateFeatures(
            f"self-HSIC too small ({kk.item():.3e}, {ll.item():.3e}); constant features?")
    return ad.div(hsic(k, l), ad.sqrt(ad.mul(kk, ll)))


def mmd_linear(x: Tensor, y: Tensor) -> Tensor:
    """Squared distance between batch feature means (linear-kernel MMD)."""
    if x.data.shape != y.data.shape or x.data.ndim != 2:
        raise ad.ShapeMismatch(f"mmd_linear: {x.data.shape} vs {y.data.shape}")
    b = x.data.shape[0]
    d = x.data.mean(axis=0) - y.data.mean(axis=0)

    def bwd(out: Tensor) -> None:
        g = out.grad * 2.0 * d / b
        ad.accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        ad.accumulate(y, -np.broadcast_to(g, y.data.shape).copy())

    return ad.make_op(np.asarray(d @ d), (x, y), bwd)


def per_step_cls_loss(head_out_t: Tensor, labels: np.ndarray, w: LossWeights) -> Tensor:
    """One timestep's classification summand: (1-lam) CE + lam MSE(., phi)."""
    ce = ad.softmax_cross_entropy(head_out_t, labels)
    target = Tensor(np.full_like(head_out_t.data, w.tet_phi))
    mse = ad.mean_squared(head_out_t, target)
    return ad.add(ad.scale(ce, 1.0 - w.tet_lambda), ad.scale(mse, w.tet_lambda))


def tet_loss(head_out: list[Tensor], labels: np.ndarray, w: LossWeights) -> Tensor:
    """Time-averaged per-step classification loss."""
    steps = [per_step_cls_loss(o, labels, w) for o in head_out]
    total = steps[0]
    for s in steps[1:]:
        total = ad.add(total, s)
    return ad.scale(total, 1.0 / len(steps))


def _one_minus(x: Tensor) -> Tensor:
    return ad.shift(ad.scale(x, -1.0), 1.0)


def domain_alignment_loss(penult_s: list[Tensor], penult_t: list[Tensor]) -> Tensor:
    """1 minus time-averaged CKA between the two feature streams."""
    if len(penult_s) != len(penult_t) or not penult_s:
        raise ad.ShapeMismatch("feature streams must have equal nonzero length")
    total = None
    for fs, ft in zip(penult_s, penult_t):
        c = cka(gram_linear(fs), gram_linear(ft))
        total = c if total is None else ad.add(total, c)
    return _one_minus(ad.scale(total, 1.0 / len(penult_s)))


def knowledge_transfer_loss(penult_s: list[Tensor], penult_t: list[Tensor],
                            event_head_out: list[Tensor], labels: np.ndarray,
                            eta: EtaParams, w: LossWeights,
                            metric: str = "cka") -> Tensor:
    """Alignment and per-step event classification, mixed by sigmoid(eta_t).

    metric "cka": 1 - mean_t sig(eta_t) CKA_t + mean_t (1-sig(eta_t)) cls_t.
    metric "mmd": the similarity term is replaced by a distance to minimize:
    mean_t sig(eta_t) MMD_t + mean_t (1-sig(eta_t)) cls_t.
    """
    t_len = len(penult_s)
    if not (t_len == len(penult_t) == len(event_head_out) == eta.eta.data.shape[0]):
        raise ad.ShapeMismatch("timestep counts disagree across inputs")
    if metric not in ("cka", "mmd"):
        raise ValueError(f"unknown alignment metric {metric!r}")
    sig = ad.sigmoid(eta.eta)
    align_sum = None
    cls_sum = None
    for t in range(t_len):
        st = ad.index(sig, t)
        if metric == "cka":
            a = cka(gram_linear(penult_s[t]), gram_linear(penult_t[t]))
        else:
            a = mmd_linear(penult_s[t], penult_t[t])
        a = ad.mul(st, a)
        c = ad.mul(_one_minus(st), per_step_cls_loss(event_head_out[t], labels, w))
        align_sum = a if align_sum is None else ad.add(align_sum, a)
        cls_sum = c if cls_sum is None else ad.add(cls_sum, c)
    align_mean = ad.scale(align_sum, 1.0 / t_len)
    cls_mean = ad.scale(cls_sum, 1.0 / t_len)
    if metric == "cka":
        return ad.add(_one_minus(align_mean), cls_mean)
    return ad.add(align_mean, cls_mean)


def total_loss(cls_s: Tensor, kt: Tensor, w: LossWeights, kt_active: bool) -> Tensor:
    """lambda_cls_s * L_cls_s, plus lambda_kt * L_kt while the gate is open."""
    out = ad.scale(cls_s, w.lambda_cls_s)
    if kt_active:
        out = ad.add(out, ad.scale(kt, w.lambda_kt))
    return out
