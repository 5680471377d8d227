"""Vicinal discriminator/generator losses with the dual negative terms.

Every term of the discriminator loss has the form

    -(coef / G) * sum_i W_i * f(D_i)

where the samples are partitioned into G nonempty weight groups whose
weights each sum to one. A batch built as one group per anchor with unit
weight reduces to a plain mean; one self-normalized group reduces to a
weighted sum. Gradients come from autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DomainError
from .vicinal import hard_weights

EPS = 1e-7
VARIANTS = ("vanilla", "hinge")


@dataclass(frozen=True)
class DualNdaParams:
    lambda1: float = 0.0
    lambda2: float = 0.0
    variant: str = "vanilla"
    # weight of the jigsaw term used by the vanilla-NDA baseline
    lambda_nda: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"loss variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("lambda1", "lambda2", "lambda_nda"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.lambda_bar + self.lambda_nda > 1.0 + 1e-12:
            raise ConfigError("lambda1 + lambda2 (+ lambda_nda) must not exceed 1")

    @property
    def lambda_bar(self) -> float:
        return self.lambda1 + self.lambda2

    @property
    def fake_coef(self) -> float:
        return 1.0 - self.lambda_bar - self.lambda_nda


@dataclass
class Term:
    """D-outputs of one loss term with optional weights and group ids."""

    out: torch.Tensor
    weight: torch.Tensor | None = None
    group: torch.Tensor | None = None

    def __len__(self) -> int:
        return int(self.out.shape[0])

    @property
    def n_groups(self) -> int:
        if self.group is None:
            return len(self)
        return int(torch.unique(self.group).numel())

    def reduce(self, values: torch.Tensor) -> torch.Tensor:
        if len(self) == 0:
            return values.sum() * 0.0
        if self.weight is not None:
            values = values * self.weight
        return values.sum() / self.n_groups

    def validate(self) -> None:
        if self.weight is None:
            return
        w = self.weight.detach().double()
        if torch.any(w < 0):
            raise DomainError("loss weights must be nonnegative")
        g = self.group if self.group is not None else torch.arange(len(self))
        sums = torch.zeros(int(g.max()) + 1 if len(g) else 0, dtype=torch.float64).index_add_(0, g, w)
        present = torch.unique(g)
        if not torch.allclose(sums[present], torch.ones_like(sums[present]), atol=1e-9):
            raise DomainError("weights within each group must sum to one")


def _empty_like(ref: torch.Tensor) -> Term:
    return Term(ref.new_zeros(0))


@dataclass
class DiscBatch:
    real: Term
    fake: Term
    type1: Term | None = None
    type2: Term | None = None
    jigsaw: Term | None = None

    def terms(self):
        ref = self.real.out
        return (self.real, self.fake, self.type1 or _empty_like(ref),
                self.type2 or _empty_like(ref), self.jigsaw or _empty_like(ref))

    def validate(self) -> None:
        for t in self.terms():
            t.validate()


def count_saturated(d: torch.Tensor) -> int:
    d = d.detach()
    return int(((d < EPS) | (d > 1 - EPS)).sum())


def _log(d):
    return torch.log(torch.clamp(d, EPS, 1 - EPS))


def _log1m(d):
    return torch.log(1 - torch.clamp(d, EPS, 1 - EPS))


def disc_loss_dual_nda(batch: DiscBatch, params: DualNdaParams) -> tuple[torch.Tensor, int]:
    """Vanilla (sigmoid-output) discriminator loss. Returns (loss, saturated count)."""
    real, fake, t1, t2, jig = batch.terms()
    loss = (-real.reduce(_log(real.out))
            - params.fake_coef * fake.reduce(_log1m(fake.out))
            - params.lambda1 * t1.reduce(_log1m(t1.out))
            - params.lambda2 * t2.reduce(_log1m(t2.out))
            - params.lambda_nda * jig.reduce(_log1m(jig.out)))
    sat = sum(count_saturated(t.out) for t in (real, fake, t1, t2, jig))
    return loss, sat


def disc_loss_dual_nda_hinge(batch: DiscBatch, params: DualNdaParams) -> tuple[torch.Tensor, int]:
    """Hinge discriminator loss on raw scores. Returns (loss, 0)."""
    real, fake, t1, t2, jig = batch.terms()

    def neg(d):
        return torch.clamp(-1.0 - d, max=0.0)

    loss = (-real.reduce(torch.clamp(-1.0 + real.out, max=0.0))
            - params.fake_coef * fake.reduce(neg(fake.out))
            - params.lambda1 * t1.reduce(neg(t1.out))
            - params.lambda2 * t2.reduce(neg(t2.out))
            - params.lambda_nda * jig.reduce(neg(jig.out)))
    return loss, 0


def disc_loss(batch: DiscBatch, params: DualNdaParams) -> tuple[torch.Tensor, int]:
    if params.variant == "hinge":
        return disc_loss_dual_nda_hinge(batch, params)
    return disc_loss_dual_nda(batch, params)


def gen_loss(d_fake: torch.Tensor, variant: str = "vanilla") -> tuple[torch.Tensor, int]:
    if variant == "hinge":
        return -d_fake.mean(), 0
    if variant != "vanilla":
        raise ConfigError(f"unknown loss variant {variant!r}")
    return -_log(d_fake).mean(), count_saturated(d_fake)


def w3_weights(pool_labels, y_target_perturbed: float, kappa: float) -> tuple[np.ndarray, bool]:
    """Hard-vicinity weights of pool entries around a perturbed target label."""
    return hard_weights(pool_labels, y_target_perturbed, kappa)


def svdl_loss(real_out, real_w, real_group, fake_out, fake_w, fake_group, variant: str = "vanilla") -> float:
    """Plain soft-vicinal loss (no negative terms), evaluated group by group in float64.

    Written independently of the batched torch path for cross-checking.
    """
    def side(out, w, g, f):
        out = np.asarray(out, dtype=np.float64)
        w = np.ones_like(out) if w is None else np.asarray(w, dtype=np.float64)
        g = np.arange(len(out)) if g is None else np.asarray(g)
        groups = np.unique(g)
        total = 0.0
        for k in groups:
            sel = g == k
            total += float(np.sum(w[sel] * f(out[sel])))
        return total / len(groups)

    if variant == "hinge":
        return (-side(real_out, real_w, real_group, lambda d: np.minimum(0.0, d - 1.0))
                - side(fake_out, fake_w, fake_group, lambda d: np.minimum(0.0, -1.0 - d)))
    clip = lambda d: np.clip(d, EPS, 1 - EPS)  # noqa: E731
    return (-side(real_out, real_w, real_group, lambda d: np.log(clip(d)))
            - side(fake_out, fake_w, fake_group, lambda d: np.log(1.0 - clip(d))))
