"""Label-noise robust classification: forward correction and co-teaching."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidInputError, InvalidSpecError, NumericalError
from .noise import TransitionMatrix

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class RobustMethod(str, Enum):
    NAIVE = "naive"
    FORWARD = "forward"
    COTEACHING = "coteaching"


@dataclass(frozen=True)
class RobustClsConfig:
    method: RobustMethod = RobustMethod.NAIVE
    T: TransitionMatrix | None = None
    drop_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "method", RobustMethod(self.method))
        if self.method is RobustMethod.FORWARD:
            if self.T is None:
                raise InvalidSpecError("forward correction needs a transition matrix")
            _check_invertible(self.T)
        if self.method is RobustMethod.COTEACHING and not 0.0 <= self.drop_rate < 1.0:
            raise InvalidSpecError(f"drop rate must lie in [0, 1), got {self.drop_rate}")


def _check_invertible(T: TransitionMatrix) -> None:
    if not isinstance(T, TransitionMatrix):
        raise InvalidSpecError("T must be a TransitionMatrix")
    if np.linalg.matrix_rank(T.entries) < T.num_classes:
        raise InvalidSpecError("transition matrix is singular")


def forward_corrected_loss(logits: Tensor, y_noisy: Tensor, T: TransitionMatrix) -> Tensor:
    """Mean of ``-log((T^T softmax(logits))[y_noisy])``.

    Evaluated in log space, ``log sum_i p_i T[i, j]``, so an identity ``T``
    gives exactly the plain cross-entropy.
    """
    _check_invertible(T)
    if not torch.isfinite(logits).all():
        raise NumericalError("classifier produced non-finite logits")
    if logits.shape[1] != T.num_classes:
        raise InvalidInputError(f"logits have {logits.shape[1]} classes, T has {T.num_classes}")
    log_p = F.log_softmax(logits, dim=1)
    log_t = torch.tensor(T.entries, dtype=logits.dtype, device=logits.device).log()
    log_noisy = torch.logsumexp(log_p[:, :, None] + log_t[None], dim=1)
    floor = math.log(PROB_FLOOR)
    if (log_noisy < floor).any():
        log.warning("forward correction: corrected probability below %.0e, clamped", PROB_FLOOR)
        log_noisy = log_noisy.clamp(min=floor)
    return F.nll_loss(log_noisy, y_noisy)


def keep_count(batch_size: int, tau: float) -> int:
    # the epsilon absorbs float error in (1 - tau) * B, e.g. (1 - 0.3) * 10
    return math.ceil((1.0 - tau) * batch_size - 1e-9)


def coteach_select(losses_a, losses_b, tau: float):
    """Small-loss cross selection.

    Returns ``(indices_for_a, indices_for_b)``: peer A trains on the
    ``ceil((1 - tau) * B)`` samples with the smallest loss under peer B and
    vice versa. Ties go to the lowest index.
    """
    if not 0.0 <= tau < 1.0:
        raise InvalidSpecError(f"drop rate must lie in [0, 1), got {tau}")
    a = torch.as_tensor(losses_a).detach().flatten()
    b = torch.as_tensor(losses_b).detach().flatten()
    if a.numel() == 0:
        raise InvalidInputError("empty batch")
    if a.shape != b.shape:
        raise InvalidInputError("peer loss vectors differ in length")
    k = keep_count(a.numel(), tau)
    for_a = torch.sort(b, stable=True).indices[:k]
    for_b = torch.sort(a, stable=True).indices[:k]
    return for_a, for_b


def coteach_losses(logits_a: Tensor, logits_b: Tensor, y: Tensor, tau: float):
    """Per-peer mean losses on the partner-selected subsets, plus the selections."""
    loss_a = F.cross_entropy(logits_a, y, reduction="none")
    loss_b = F.cross_entropy(logits_b, y, reduction="none")
    idx_a, idx_b = coteach_select(loss_a, loss_b, tau)
    return loss_a[idx_a].mean(), loss_b[idx_b].mean(), idx_a, idx_b


class CoteachingState:
    """Two peer classifiers, each with its own optimizer.

    Peer A is the classifier seen by the generator objectives.
    """

    def __init__(self, peer_a: nn.Module, peer_b: nn.Module, lr: float = 1e-4, betas=(0.5, 0.999)):
        if peer_a is peer_b:
            raise InvalidSpecError("co-teaching peers must be distinct networks")
        if [p.shape for p in peer_a.parameters()] != [p.shape for p in peer_b.parameters()]:
            raise InvalidSpecError("co-teaching peers must share an architecture")
        self.peer_a, self.peer_b = peer_a, peer_b
        self.opt_a = torch.optim.Adam(peer_a.parameters(), lr=lr, betas=betas)
        self.opt_b = torch.optim.Adam(peer_b.parameters(), lr=lr, betas=betas)
        self.selected_fraction: list[float] = []

    def step(self, x: Tensor, y: Tensor, tau: float) -> Tensor:
        """One cross update of both peers; returns peer A's selected-subset loss."""
        if x.shape[0] == 0:
            raise InvalidInputError("empty batch")
        loss_a, loss_b, idx_a, _ = coteach_losses(self.peer_a(x), self.peer_b(x), y, tau)
        self.opt_a.zero_grad()
        self.opt_b.zero_grad()
        (loss_a + loss_b).backward()
        self.opt_a.step()
        self.opt_b.step()
        self.selected_fraction.append(len(idx_a) / x.shape[0])
        return loss_a.detach()


def coteach_step(state: CoteachingState, batch, tau: float):
    x, y = batch
    loss = state.step(x, y, tau)
    return state, loss
