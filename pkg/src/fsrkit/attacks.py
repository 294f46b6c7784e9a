"""White-box l-infinity attacks: FGSM, PGD with cross-entropy, PGD with the C&W margin."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .models import logits_of

FAMILIES = ("fgsm", "pgd", "cw-pgd", "none")
LOSSES = ("cross-entropy", "cw-margin")


@dataclass
class AttackSpec:
    """Fully determines an adversary. ``epsilon=math.inf`` means unbounded (clip to [0, 1] only)."""

    name: str = "pgd-20"
    family: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 0.8 / 255
    steps: int = 20
    random_start: bool = False
    loss: str = "cross-entropy"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown attack loss {self.loss!r}; expected one of {LOSSES}")
        if not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.family == "fgsm" and self.steps != 1:
            raise ConfigurationError("fgsm takes exactly one step")
        if self.family in ("pgd", "cw-pgd") and not self.step_size > 0:
            raise ConfigurationError(f"step_size must be positive for {self.family}, got {self.step_size}")
        if self.family == "cw-pgd" and self.loss != "cw-margin":
            raise ConfigurationError("cw-pgd uses the cw-margin loss")


def fgsm_spec(epsilon=8 / 255, name="fgsm"):
    return AttackSpec(name=name, family="fgsm", epsilon=epsilon, step_size=epsilon, steps=1)


def pgd_spec(steps, epsilon=8 / 255, step_size=None, random_start=False, name=None):
    step_size = epsilon / 10 if step_size is None else step_size
    return AttackSpec(
        name=name or f"pgd-{steps}",
        family="pgd",
        epsilon=epsilon,
        step_size=step_size,
        steps=steps,
        random_start=random_start,
    )


def cw_spec(steps=30, epsilon=8 / 255, step_size=None, name="cw"):
    step_size = epsilon / 10 if step_size is None else step_size
    return AttackSpec(name=name, family="cw-pgd", epsilon=epsilon, step_size=step_size, steps=steps, loss="cw-margin")


def none_spec(name="natural"):
    return AttackSpec(name=name, family="none", epsilon=0.0, step_size=0.0, steps=1)


def default_eval_specs(epsilon=8 / 255):
    """FGSM, PGD-20, PGD-100 and 30-step C&W, all with step size epsilon/10."""
    return [fgsm_spec(epsilon), pgd_spec(20, epsilon), pgd_spec(100, epsilon), cw_spec(30, epsilon)]


@dataclass
class AdversarialBatch:
    x_adv: torch.Tensor
    x_clean: torch.Tensor
    y: torch.Tensor

    @property
    def delta_linf(self):
        """Per-example max |x_adv - x_clean|, computed in float64."""
        d = (self.x_adv.double() - self.x_clean.double()).abs()
        return d.flatten(1).max(dim=1).values


def cw_margin(logits, y):
    """Per-example ``max_{i != y} z_i - z_y`` (confidence offset 0)."""
    other = logits.clone()
    other.scatter_(1, y.view(-1, 1), float("-inf"))
    return other.max(dim=1).values - logits.gather(1, y.view(-1, 1)).squeeze(1)


def attack_loss(logits, y, loss):
    if loss == "cross-entropy":
        return F.cross_entropy(logits, y, reduction="sum")
    return cw_margin(logits, y).sum()


def project(x_adv, x, epsilon):
    """Clamp to the epsilon-box around ``x`` intersected with [0, 1]."""
    if math.isfinite(epsilon):
        x_adv = torch.min(torch.max(x_adv, x - epsilon), x + epsilon)
    return x_adv.clamp(0.0, 1.0)


class _eval_mode:
    """Put a model in evaluation mode for the duration of a block."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def input_gradient(model, x, y, loss="cross-entropy"):
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        value = attack_loss(logits_of(model(x)), y, loss)
        (grad,) = torch.autograd.grad(value, x)
    return grad


def _iterate(model, x, y, epsilon, step_size, steps, loss, random_start, generator):
    x = x.detach()
    if random_start and math.isfinite(epsilon) and epsilon > 0:
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        x_adv = project(x + (2 * noise - 1) * epsilon, x, epsilon)
    else:
        x_adv = x.clone()
    for _ in range(steps):
        grad = input_gradient(model, x_adv, y, loss)
        x_adv = project(x_adv + step_size * grad.sign(), x, epsilon)
    return x_adv.detach()


def fgsm(model, x, y, spec: AttackSpec):
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    with _eval_mode(model):
        x = x.detach()
        grad = input_gradient(model, x, y, spec.loss)
        x_adv = project(x + spec.epsilon * grad.sign(), x, spec.epsilon)
    return AdversarialBatch(x_adv.detach(), x, y)


def pgd(model, x, y, spec: AttackSpec, generator=None):
    """Projected signed-gradient ascent on ``spec.loss`` within the epsilon-ball."""
    with _eval_mode(model):
        x_adv = _iterate(model, x, y, spec.epsilon, spec.step_size, spec.steps, spec.loss, spec.random_start, generator)
    return AdversarialBatch(x_adv, x.detach(), y)


def cw_pgd(model, x, y, spec: AttackSpec, generator=None):
    """PGD maximising the C&W logit margin."""
    with _eval_mode(model):
        x_adv = _iterate(model, x, y, spec.epsilon, spec.step_size, spec.steps, "cw-margin", spec.random_start, generator)
    return AdversarialBatch(x_adv, x.detach(), y)


def run_attack(model, x, y, spec: AttackSpec, generator=None):
    if spec.family == "none":
        x = x.detach()
        return AdversarialBatch(x.clone(), x, y)
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec)
    if spec.family == "pgd":
        return pgd(model, x, y, spec, generator)
    return cw_pgd(model, x, y, spec, generator)


def attack_battery(model, x, y, specs: List[AttackSpec], seed=0, batch_size=256) -> Dict[str, List[AdversarialBatch]]:
    """Run every attack over ``(x, y)`` in fixed-order batches.

    Batch ``j`` of every stream covers the same example indices, so streams
    can be compared example by example. Random starts draw from a generator
    seeded by ``seed`` and the attack's position in ``specs``.
    """
    if not specs:
        raise ConfigurationError("attack_battery needs at least one attack spec")
    if len(x) == 0:
        raise ConfigurationError("attack_battery got an empty dataset")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"attack names must be unique, got {names}")
    streams = {}
    for i, spec in enumerate(specs):
        gen = torch.Generator().manual_seed(seed * 1000 + i)
        streams[spec.name] = [
            run_attack(model, x[s : s + batch_size], y[s : s + batch_size], spec, gen)
            for s in range(0, len(x), batch_size)
        ]
    return streams


def concat(batches: List[AdversarialBatch]) -> AdversarialBatch:
    return AdversarialBatch(
        torch.cat([b.x_adv for b in batches]),
        torch.cat([b.x_clean for b in batches]),
        torch.cat([b.y for b in batches]),
    )


def attack_dataset(model, x, y, spec: AttackSpec, seed=0, batch_size=256, generator: Optional[torch.Generator] = None):
    """Adversarial version of a whole dataset under one attack."""
    gen = generator or torch.Generator().manual_seed(seed)
    return concat(
        [run_attack(model, x[s : s + batch_size], y[s : s + batch_size], spec, gen) for s in range(0, len(x), batch_size)]
    )
