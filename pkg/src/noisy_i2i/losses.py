"""Translation objectives: adversarial, classification and cycle terms.

Networks are passed as callables so the functions also work with stubs:
``G(x, y) -> image``, ``D(x) -> realness`` (or a ``(realness, logits)``
pair) and ``C(x) -> logits``. All L1 terms average over batch, channels and
pixels.

Adversarial helpers return ``(d_term, g_term)``. ``d_term`` is the quantity
the discriminator maximizes (for WGAN-GP it already includes
``-gp_weight * penalty``); ``g_term`` is what the generator minimizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidInputError, InvalidSpecError, NumericalError

GenFn = Callable[[Tensor, Tensor], Tensor]
ClsFn = Callable[[Tensor], Tensor]


class Variant(str, Enum):
    STARGAN = "StarGAN"
    STARGAN_RECYC = "StarGAN_recyc"
    RMIT = "RMIT"
    RMIT_CYC_VCYC = "RMIT_cyc-vcyc"
    RMIT_RECYC_VCYC = "RMIT_recyc-vcyc"
    RMIT_ADV2 = "RMIT_adv2"

    @classmethod
    def parse(cls, value) -> "Variant":
        try:
            return cls(value)
        except ValueError:
            raise InvalidSpecError(f"unknown model variant {value!r}") from None

    @property
    def uses_adv2(self) -> bool:
        return self is Variant.RMIT_ADV2


class GanObjective(str, Enum):
    VANILLA = "vanilla"
    WGAN_GP = "wgan_gp"


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    alpha: float = 0.5
    lambda_id: float = 0.0
    gan_objective: GanObjective = GanObjective.WGAN_GP
    gp_weight: float = 10.0
    use_adv2: bool = False
    relabel_mode: str = "sample"

    def __post_init__(self):
        object.__setattr__(self, "gan_objective", GanObjective(self.gan_objective))
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidSpecError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("lambda_cls", "lambda_cyc", "lambda_id", "gp_weight"):
            if getattr(self, name) < 0:
                raise InvalidSpecError(f"{name} must be nonnegative")
        if self.relabel_mode not in ("sample", "argmax"):
            raise InvalidSpecError(f"relabel_mode must be 'sample' or 'argmax', got {self.relabel_mode!r}")


TERM_NAMES = (
    "adv_d", "adv_g", "cls_r", "cls_f", "cyc", "vcyc", "recyc", "mixed",
    "adv2_d", "adv2_g", "id", "total_d", "total_g",
)


@dataclass
class LossBundle:
    """Scalar values of every term computed in one training step."""

    adv_d: float | None = None
    adv_g: float | None = None
    cls_r: float | None = None
    cls_f: float | None = None
    cyc: float | None = None
    vcyc: float | None = None
    recyc: float | None = None
    mixed: float | None = None
    adv2_d: float | None = None
    adv2_g: float | None = None
    id: float | None = None
    total_d: float | None = None
    total_g: float | None = None

    @classmethod
    def from_terms(cls, terms: Mapping[str, Tensor | float]) -> "LossBundle":
        known = {f.name for f in fields(cls)}
        return cls(**{k: float(v.detach() if torch.is_tensor(v) else v) for k, v in terms.items() if k in known})

    def recorded(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.recorded().values())

    def merge(self, other: "LossBundle") -> "LossBundle":
        values = self.recorded()
        values.update(other.recorded())
        return LossBundle(**values)


def _scores(D, x: Tensor) -> Tensor:
    out = D(x)
    return out[0] if isinstance(out, tuple) else out


def _check_batch(x: Tensor) -> None:
    if x.dim() == 0 or x.shape[0] == 0:
        raise InvalidInputError("empty batch")


def l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def gradient_penalty(D, real: Tensor, fake: Tensor, eps: Tensor | None = None,
                     generator: torch.Generator | None = None) -> Tensor:
    """Mean of ``(||grad_x D(x_hat)||_2 - 1)^2`` on random interpolates ``x_hat``."""
    if eps is None:
        eps = torch.rand(real.shape[0], 1, 1, 1, generator=generator, dtype=real.dtype, device=real.device)
    x_hat = (eps * real + (1 - eps) * fake).requires_grad_(True)
    out = _scores(D, x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norm = grad.flatten(1).norm(2, dim=1)
    return ((norm - 1) ** 2).mean()


def adv_from_scores(s_real: Tensor, s_fake: Tensor, objective=GanObjective.VANILLA) -> Tensor:
    """Discriminator-side adversarial value before any gradient penalty."""
    if GanObjective(objective) is GanObjective.VANILLA:
        # log D(x) + log(1 - D(G(x, y'))) with D = sigmoid(score)
        return F.logsigmoid(s_real).mean() + F.logsigmoid(-s_fake).mean()
    return s_real.mean() - s_fake.mean()


def discriminator_adv(D, real: Tensor, fake: Tensor, objective=GanObjective.VANILLA,
                      gp_weight: float = 10.0, generator: torch.Generator | None = None) -> Tensor:
    _check_batch(real)
    objective = GanObjective(objective)
    value = adv_from_scores(_scores(D, real), _scores(D, fake), objective)
    if objective is GanObjective.WGAN_GP and gp_weight:
        value = value - gp_weight * gradient_penalty(D, real.detach(), fake.detach(), generator=generator)
    return value


def generator_adv(D, fake: Tensor, objective=GanObjective.VANILLA) -> Tensor:
    _check_batch(fake)
    s_fake = _scores(D, fake)
    if GanObjective(objective) is GanObjective.VANILLA:
        return F.logsigmoid(-s_fake).mean()
    return -s_fake.mean()


def adv_loss(D, G: GenFn, x: Tensor, y_prime: Tensor, objective=GanObjective.VANILLA,
             gp_weight: float = 10.0, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
    _check_batch(x)
    fake = G(x, y_prime)
    return (
        discriminator_adv(D, x, fake, objective, gp_weight, generator),
        generator_adv(D, fake, objective),
    )


def second_adv_loss(D_prime, G: GenFn, x: Tensor, y_prime: Tensor, y_dprime: Tensor,
                    objective=GanObjective.VANILLA, gp_weight: float = 10.0,
                    generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Adversarial terms for the twice-converted image ``G(G(x, y'), y'')``."""
    if D_prime is None:
        raise InvalidSpecError("second discriminator is not built")
    _check_batch(x)
    twice = G(G(x, y_prime), y_dprime)
    return (
        discriminator_adv(D_prime, x, twice, objective, gp_weight, generator),
        generator_adv(D_prime, twice, objective),
    )


def classification_nll(logits: Tensor, y: Tensor) -> Tensor:
    if not torch.isfinite(logits).all():
        raise NumericalError("classifier produced non-finite logits")
    if y.is_floating_point():
        # binary attributes: summed over attributes, averaged over the batch
        return F.binary_cross_entropy_with_logits(logits, y, reduction="sum") / logits.shape[0]
    return F.cross_entropy(logits, y)


def cls_real_loss(C: ClsFn, x: Tensor, y_noisy: Tensor) -> Tensor:
    _check_batch(x)
    return classification_nll(C(x), y_noisy)


def cls_fake_loss(C: ClsFn, G: GenFn, x: Tensor, y_prime: Tensor) -> Tensor:
    _check_batch(x)
    return classification_nll(C(G(x, y_prime)), y_prime)


def cycle_loss(G: GenFn, x: Tensor, y_noisy: Tensor, y_prime: Tensor) -> Tensor:
    return l1(x, G(G(x, y_prime), y_noisy))


def virtual_cycle_loss(G: GenFn, x: Tensor, y_prime: Tensor, y_dprime: Tensor) -> Tensor:
    """Cycle consistency among generated images only; no training label enters."""
    x1 = G(x, y_prime)
    return l1(x1, G(G(x1, y_dprime), y_prime))


def relabel(C: ClsFn, x: Tensor, mode: str = "sample", generator: torch.Generator | None = None,
            multilabel: bool = False) -> Tensor:
    with torch.no_grad():
        logits = C(x)
        if multilabel:
            probs = torch.sigmoid(logits)
            if mode == "argmax":
                return (probs > 0.5).to(x.dtype)
            return torch.bernoulli(probs, generator=generator).to(x.dtype)
        if mode == "argmax":
            return logits.argmax(dim=1)
        probs = torch.softmax(logits, dim=1)
        return torch.multinomial(probs, 1, generator=generator).squeeze(1)


def relabeled_cycle_loss(G: GenFn, C: ClsFn, x: Tensor, y_prime: Tensor, mode: str = "sample",
                         generator: torch.Generator | None = None) -> Tensor:
    """Cycle loss reconstructing toward a label drawn from the classifier."""
    if mode not in ("sample", "argmax"):
        raise InvalidSpecError(f"unknown relabel mode {mode!r}")
    y = relabel(C, x, mode, generator, multilabel=y_prime.is_floating_point())
    return cycle_loss(G, x, y, y_prime)


def mix(base_value: Tensor, vcyc_value: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidSpecError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * base_value + (1 - alpha) * vcyc_value


def mixed_cycle_loss(base: str, alpha: float, G: GenFn, x: Tensor, y_noisy: Tensor | None,
                     y_prime: Tensor, y_dprime: Tensor, C: ClsFn | None = None,
                     mode: str = "sample", generator: torch.Generator | None = None) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidSpecError(f"alpha must lie in [0, 1], got {alpha}")
    if base == "cyc":
        base_value = cycle_loss(G, x, y_noisy, y_prime)
    elif base == "recyc":
        base_value = relabeled_cycle_loss(G, C, x, y_prime, mode, generator)
    else:
        raise InvalidSpecError(f"unknown mixed-loss base {base!r}")
    return mix(base_value, virtual_cycle_loss(G, x, y_prime, y_dprime), alpha)


def identity_loss(G: GenFn, x: Tensor, y_self: Tensor) -> Tensor:
    return l1(G(x, y_self), x)


def cycle_coefficients(variant: Variant, weights: LossWeights) -> dict[str, float]:
    """Weights of cyc / recyc / vcyc inside ``lambda_cyc * (...)``."""
    a = weights.alpha
    return {
        Variant.STARGAN: {"cyc": 1.0},
        Variant.STARGAN_RECYC: {"recyc": 1.0},
        Variant.RMIT: {"vcyc": 1.0},
        Variant.RMIT_CYC_VCYC: {"cyc": a, "vcyc": 1 - a},
        Variant.RMIT_RECYC_VCYC: {"recyc": a, "vcyc": 1 - a},
        Variant.RMIT_ADV2: {"vcyc": 1.0},
    }[Variant.parse(variant)]


def generator_objective(variant, weights: LossWeights) -> dict[str, float]:
    """Coefficient of every term in the generator objective of ``variant``."""
    variant = Variant.parse(variant)
    coeffs = {"adv_g": 1.0, "cls_f": weights.lambda_cls}
    for name, c in cycle_coefficients(variant, weights).items():
        coeffs[name] = weights.lambda_cyc * c
    if variant.uses_adv2 or weights.use_adv2:
        coeffs["adv2_g"] = 1.0
    if weights.lambda_id:
        coeffs["id"] = weights.lambda_id
    return coeffs


def discriminator_objective(variant, weights: LossWeights) -> dict[str, float]:
    variant = Variant.parse(variant)
    coeffs = {"adv_d": -1.0, "cls_r": weights.lambda_cls}
    if variant.uses_adv2 or weights.use_adv2:
        coeffs["adv2_d"] = -1.0
    return coeffs


_CYCLE_FORMULA = {
    Variant.STARGAN: "λ_cyc L_cyc",
    Variant.STARGAN_RECYC: "λ_cyc L_recyc",
    Variant.RMIT: "λ_cyc L_vcyc",
    Variant.RMIT_CYC_VCYC: "λ_cyc (α L_cyc + (1 - α) L_vcyc)",
    Variant.RMIT_RECYC_VCYC: "λ_cyc (α L_recyc + (1 - α) L_vcyc)",
    Variant.RMIT_ADV2: "λ_cyc L_vcyc + L_adv2",
}


def objective_formula(variant) -> str:
    """Symbolic generator objective, e.g. ``L_adv + λ_cls L_cls^f + λ_cyc L_cyc``."""
    return f"L_adv + λ_cls L_cls^f + {_CYCLE_FORMULA[Variant.parse(variant)]}"


def full_objectives(weights: LossWeights, terms: Mapping[str, Tensor | float], variant) -> tuple:
    """Compose ``(total_d, total_g)`` from per-term values.

    ``total_d`` also carries the second discriminator's objective when the
    variant uses it; D and D' have disjoint parameters so one backward pass
    serves both.
    """
    variant = Variant.parse(variant)
    totals = []
    for coeffs in (discriminator_objective(variant, weights), generator_objective(variant, weights)):
        total = 0.0
        for name, c in coeffs.items():
            if c == 0:
                continue
            if name not in terms:
                total = None
                break
            total = total + c * terms[name]
        totals.append(total)
    return tuple(totals)
