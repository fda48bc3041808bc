"""Remedies against weight-sharing gradient interference, and the total loss.

Three levers keep the full-width network in charge of the shared weights:
a slow start (sub-widths sit out the first S epochs entirely), online
distillation from the full-width prediction distribution to each sub-width,
and per-width loss weights biased toward the full model. The total
objective combines the per-width contrastive losses with the distillation
terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from slimcontrast.slimnet import WidthConfig

DISTILL_FORMS = ("none", "kd", "mse", "literal_eq5")
DISTILL_FORM_STUBS = ("atkd", "dkd")  # accepted in config, rejected at use
REWEIGHT_VARIANTS = ("none", "1", "2", "3", "4")


@dataclass
class RemedyConfig:
    slow_start_epochs: int = 0
    distill_form: str = "kd"
    distill_tau: float = 5.0
    reweight_variant: str = "1"

    def __post_init__(self):
        self.reweight_variant = str(self.reweight_variant)
        if self.slow_start_epochs < 0:
            raise ValueError("slow_start_epochs must be >= 0")
        if self.distill_tau <= 0:
            raise ValueError("distill_tau must be positive")
        if self.distill_form not in DISTILL_FORMS + DISTILL_FORM_STUBS:
            raise ValueError(f"unknown distill_form {self.distill_form!r}")
        if self.reweight_variant not in REWEIGHT_VARIANTS:
            raise ValueError(f"unknown reweight_variant {self.reweight_variant!r}")


def distill_distribution(student_pred: torch.Tensor, target: torch.Tensor,
                         negatives: Optional[torch.Tensor], tau2: float) -> torch.Tensor:
    """Class probabilities over [positive, negatives] at temperature ``tau2``.

    Entry 0 is the positive-pair probability. With ``negatives=None`` the
    in-batch convention applies: row i's positive is target i and its
    negative classes are the other targets in ascending index order.
    """
    if tau2 <= 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    squeeze = student_pred.ndim == 1
    s = student_pred.unsqueeze(0) if squeeze else student_pred
    t = target.unsqueeze(0) if target.ndim == 1 else target
    if negatives is None:
        b = s.shape[0]
        if b < 2:
            raise ValueError("in-batch distillation needs batch size >= 2")
        sims = s @ t.T
        pos = sims.diagonal().unsqueeze(1)
        mask = ~torch.eye(b, dtype=torch.bool, device=s.device)
        neg = sims[mask].reshape(b, b - 1)
        logits = torch.cat([pos, neg], dim=1) / tau2
    else:
        pos = (s * t).sum(dim=-1, keepdim=True)
        neg = s @ negatives.T
        logits = torch.cat([pos, neg], dim=1) / tau2
    probs = torch.softmax(logits, dim=1)
    return probs.squeeze(0) if squeeze else probs


def distill_loss(teacher_dist: torch.Tensor, student_dist: torch.Tensor,
                 form: str = "kd", eps: float = 1e-12) -> torch.Tensor:
    """Distillation penalty between two class distributions (teacher fixed).

    kd: full cross-entropy -sum_c q_t(c) log q_s(c); mse: mean squared
    difference of the distributions; literal_eq5: -p_t log p_s using only
    the positive-class probabilities.
    """
    if form in DISTILL_FORM_STUBS:
        raise NotImplementedError(f"distillation form {form!r} is a named stub and not implemented")
    if form not in ("kd", "mse", "literal_eq5"):
        raise ValueError(f"unknown distillation form {form!r}")
    if teacher_dist.shape != student_dist.shape:
        raise ValueError(f"distribution shapes differ: {tuple(teacher_dist.shape)} "
                         f"vs {tuple(student_dist.shape)}")
    t = teacher_dist.detach()
    if form == "kd":
        per = -(t * torch.log(student_dist.clamp_min(eps))).sum(dim=-1)
    elif form == "mse":
        per = ((t - student_dist) ** 2).mean(dim=-1)
    else:
        # 2d inputs are class distributions (positive class first);
        # 0d/1d inputs are positive-pair probabilities directly.
        if t.ndim >= 2:
            t0, s0 = t[..., 0], student_dist[..., 0]
        else:
            t0, s0 = t, student_dist
        per = -t0 * torch.log(s0.clamp_min(eps))
    return per.mean()


def loss_weights(config: WidthConfig, variant: str | int = "1") -> list[float]:
    """Per-width loss multipliers, variants 1-4 plus 'none' (all ones).

    Variant 4 follows its formula exactly; the commonly quoted rounded
    weights for it differ slightly from what the formula yields.
    """
    variant = str(variant)
    ws = config.widths
    n = config.n
    if variant == "none":
        return [1.0] * n
    if variant == "1":
        bonus = sum(ws[1:])
        return [1.0 + (bonus if i == 0 else 0.0) for i in range(n)]
    if variant == "2":
        bonus = max(ws[1:]) if n > 1 else 0.0
        return [1.0 + (bonus if i == 0 else 0.0) for i in range(n)]
    if variant == "3":
        total = sum(ws)
        return [n * w / total for w in ws]
    if variant == "4":
        tails = [1.0 + sum(ws[j:]) for j in range(n)]
        denom = sum(tails)
        return [n * t / denom for t in tails]
    raise ValueError(f"unknown reweighting variant {variant!r}")


@dataclass
class ObjectiveBreakdown:
    """The total pre-training loss together with its per-width parts."""

    infonce: dict[float, torch.Tensor]
    distill: dict[float, torch.Tensor]
    weights: dict[float, float]
    total: torch.Tensor

    def scalars(self) -> dict:
        return {
            "loss_total": float(self.total.detach()),
            "loss_infonce": {repr(w): float(v.detach()) for w, v in self.infonce.items()},
            "loss_distill": {repr(w): float(v.detach()) for w, v in self.distill.items()},
        }


def total_objective(infonce: dict[float, torch.Tensor],
                    distill: dict[float, torch.Tensor],
                    weights: Sequence[float], config: WidthConfig,
                    epoch: int, slow_start_epochs: int) -> ObjectiveBreakdown:
    """Combine per-width losses into the single pre-training objective.

    Before the slow-start boundary only the full-width loss exists:
    total = w_full * L_full. Afterwards each sub-width contributes the
    average of its contrastive and distillation losses, scaled by its
    weight; with distillation disabled (empty ``distill``) the sub-width
    contrastive losses enter unaveraged.
    """
    ws = config.widths
    if len(weights) != config.n:
        raise ValueError(f"expected {config.n} weights, got {len(weights)}")
    wmap = dict(zip(ws, (float(x) for x in weights)))
    full = ws[0]
    if full not in infonce:
        raise ValueError("missing the full-width contrastive loss")
    if epoch < slow_start_epochs:
        extras = set(infonce) - {full}
        if extras or distill:
            raise ValueError(f"sub-width losses present before the slow-start boundary "
                             f"(epoch {epoch} < {slow_start_epochs}): {sorted(extras) or sorted(distill)}")
        total = wmap[full] * infonce[full]
        return ObjectiveBreakdown(dict(infonce), {}, {full: wmap[full]}, total)

    missing = set(ws) - set(infonce)
    if missing:
        raise ValueError(f"missing contrastive losses for widths {sorted(missing)}")
    total = wmap[full] * infonce[full]
    if distill:
        lacking = set(ws[1:]) - set(distill)
        if lacking:
            raise ValueError(f"missing distillation losses for sub-widths {sorted(lacking)} "
                             f"after the slow-start boundary")
        for w in ws[1:]:
            total = total + wmap[w] * (infonce[w] + distill[w]) / 2.0
    else:
        for w in ws[1:]:
            total = total + wmap[w] * infonce[w]
    return ObjectiveBreakdown(dict(infonce), dict(distill), wmap, total)


def gradient_accumulation_check(model: torch.nn.Module,
                                losses_by_width: dict[float, torch.Tensor],
                                partition) -> tuple[bool, float]:
    """Verify the joint-loss gradient equals the sum of per-loss gradients.

    Checks every width partition of the shared parameters; returns pass/fail
    at 1e-6 relative error together with the worst deviation observed.
    """
    params = [e.tensor for e in partition.entries]
    per_loss = {}
    for w, loss in losses_by_width.items():
        grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        per_loss[w] = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    joint_loss = sum(losses_by_width.values())
    joint = torch.autograd.grad(joint_loss, params, retain_graph=True, allow_unused=True)
    joint = [torch.zeros_like(p) if g is None else g for g, p in zip(joint, params)]

    joint_flat = partition.gather_flat(joint)
    summed_flat = partition.gather_flat([sum(gs) for gs in zip(*per_loss.values())])
    worst = 0.0
    for w in partition.widths:
        mask = partition.width_masks[w]
        if not mask.any():
            continue
        a, b = joint_flat[mask], summed_flat[mask]
        denom = max(float(abs(a).max()), 1e-30)
        dev = float(abs(a - b).max()) / denom
        worst = max(worst, dev)
    return worst <= 1e-6, worst
