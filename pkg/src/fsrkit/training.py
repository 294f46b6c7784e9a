"""Adversarial training with the FSR auxiliary losses.

``classification_loss`` covers plain adversarial training (AT), TRADES and
MART. ``total_loss`` adds the separation and recalibration losses of every
FSR layer, averaged over layers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn.functional as F

from .attacks import AttackSpec, project, run_attack
from .errors import ConfigurationError, DomainError, TrainingDivergedError
from .fsr import recalibration_loss, separation_loss
from .models import ModelOutput

log = logging.getLogger(__name__)

VARIANTS = ("at", "trades", "mart")


def default_train_attack():
    eps = 8 / 255
    return AttackSpec(name="pgd-10-train", family="pgd", epsilon=eps, step_size=eps / 4, steps=10, random_start=True)


@dataclass
class DefenseSpec:
    variant: str = "at"
    lambda_sep: float = 1.0
    lambda_rec: float = 1.0
    variant_beta: float = 6.0
    train_attack: AttackSpec = field(default_factory=default_train_attack)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown defense variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lambda_sep < 0 or self.lambda_rec < 0 or self.variant_beta < 0:
            raise ConfigurationError("lambda_sep, lambda_rec and variant_beta must be >= 0")


@dataclass
class Schedule:
    """SGD with piecewise-constant learning rate. Desk default is the paper schedule scaled by 1/5."""

    epochs: int = 20
    lr: float = 0.05
    milestones: Tuple[int, ...] = (15, 18)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0 or self.batch_size < 1:
            raise ConfigurationError("lr must be positive and batch_size >= 1")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigurationError(f"milestones must be increasing, got {self.milestones}")

    @classmethod
    def paper(cls):
        return cls(epochs=100, lr=0.1, milestones=(75, 90))

    def lr_at(self, epoch):
        """Learning rate used during (0-based) ``epoch``."""
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss_cls: float
    loss_sep: float
    loss_rec: float
    loss_total: float
    clean_acc: float
    adv_acc: float


def kl_rows(p_log, q_log):
    """Per-row KL(p || q) from log-probabilities."""
    return (p_log.exp() * (p_log - q_log)).sum(dim=1)


def classification_loss(logits_nat, logits_adv, y, variant="at", beta=6.0):
    """The L_cls term.

    at:     CE(logits_adv, y)
    trades: CE(logits_nat, y) + beta * mean KL(p_nat || p_adv)
    mart:   mean[-log p_adv[y] - log(1 - max_{k!=y} p_adv[k])]
            + beta * mean[KL(p_nat || p_adv) * (1 - p_nat[y])]
    """
    if variant == "at":
        return F.cross_entropy(logits_adv, y)
    if variant == "trades":
        if logits_nat is None:
            raise ConfigurationError("trades needs natural logits")
        kl = kl_rows(F.log_softmax(logits_nat, dim=1), F.log_softmax(logits_adv, dim=1))
        return F.cross_entropy(logits_nat, y) + beta * kl.mean()
    if variant == "mart":
        if logits_nat is None:
            raise ConfigurationError("mart needs natural logits")
        p_adv = F.softmax(logits_adv, dim=1)
        masked = p_adv.clone()
        masked.scatter_(1, y.view(-1, 1), float("-inf"))
        top_wrong = masked.max(dim=1).values
        boosted_ce = F.cross_entropy(logits_adv, y, reduction="none") - torch.log((1 - top_wrong).clamp_min(1e-12))
        log_nat = F.log_softmax(logits_nat, dim=1)
        true_nat = log_nat.gather(1, y.view(-1, 1)).squeeze(1).exp()
        kl = kl_rows(log_nat, F.log_softmax(logits_adv, dim=1))
        return boosted_ce.mean() + beta * (kl * (1 - true_nat)).mean()
    raise ConfigurationError(f"unknown defense variant {variant!r}")


def auxiliary_losses(output: ModelOutput, y, sep_target="mispredicted"):
    """Per-layer (L_sep, L_rec) pairs; a loss is None where the routing has no such term."""
    pairs = []
    for res in output.fsr_results:
        sep = rec = None
        if res.uses_separation_loss:
            sep = separation_loss(
                res.log_p_plus, res.log_p_minus, y, output.logits, sep_target=sep_target, log_probs=True
            )
        if res.uses_recalibration_loss:
            rec = recalibration_loss(res.log_p_minus_recal, y, log_probs=True)
        pairs.append((sep, rec))
    return pairs


def total_loss(output: ModelOutput, y, defense: DefenseSpec, logits_nat=None, sep_target="mispredicted"):
    """Classification loss plus the layer-averaged weighted FSR losses.

    Returns ``(loss, breakdown)``; ``breakdown`` holds the weighted components
    ``cls``, ``sep``, ``rec`` (which sum to ``total``) and the unweighted
    layer means ``sep_raw``, ``rec_raw``.
    """
    n_layers = len(output.fsr_results)
    if n_layers == 0 and (defense.lambda_sep > 0 or defense.lambda_rec > 0):
        raise ConfigurationError("lambda_sep/lambda_rec > 0 but the model has no FSR layer")
    cls = classification_loss(logits_nat, output.logits, y, defense.variant, defense.variant_beta)
    zero = cls.new_zeros(())
    sep_raw, rec_raw = zero, zero
    if n_layers:
        pairs = auxiliary_losses(output, y, sep_target)
        sep_raw = sum((s for s, _ in pairs if s is not None), zero) / n_layers
        rec_raw = sum((r for _, r in pairs if r is not None), zero) / n_layers
    sep = defense.lambda_sep * sep_raw
    rec = defense.lambda_rec * rec_raw
    loss = cls + sep + rec
    breakdown = {
        "cls": cls.item(),
        "sep": sep.item(),
        "rec": rec.item(),
        "total": loss.item(),
        "sep_raw": sep_raw.item(),
        "rec_raw": rec_raw.item(),
    }
    return loss, breakdown


def trades_perturb(model, x, spec: AttackSpec, generator=None):
    """TRADES inner maximisation: PGD on KL(p_nat || p_adv) from a small Gaussian start."""
    was_training = model.training
    model.eval()
    try:
        x = x.detach()
        with torch.no_grad():
            log_nat = F.log_softmax(model(x).logits, dim=1)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        x_adv = project(x + 0.001 * noise, x, spec.epsilon)
        for _ in range(spec.steps):
            x_adv.requires_grad_(True)
            with torch.enable_grad():
                kl = kl_rows(log_nat, F.log_softmax(model(x_adv).logits, dim=1)).sum()
                (grad,) = torch.autograd.grad(kl, x_adv)
            x_adv = project(x_adv.detach() + spec.step_size * grad.sign(), x, spec.epsilon)
    finally:
        model.train(was_training)
    return x_adv.detach()


def craft_training_examples(model, x, y, defense: DefenseSpec, generator=None):
    if defense.variant == "trades":
        return trades_perturb(model, x, defense.train_attack, generator)
    return run_attack(model, x, y, defense.train_attack, generator).x_adv


def make_optimizer(model, schedule: Schedule):
    return torch.optim.SGD(
        model.parameters(), lr=schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )


def _batch_diagnostics(x, y, output=None, breakdown=None, error=None):
    stats = {
        "batch_size": int(x.shape[0]),
        "x_min": float(x.min()),
        "x_max": float(x.max()),
        "x_finite": bool(torch.isfinite(x).all()),
        "labels": sorted(set(y.tolist())),
    }
    if output is not None:
        logits = output.logits.detach()
        stats["logits_finite"] = bool(torch.isfinite(logits).all())
        stats["logits_abs_max"] = float(logits.abs().nan_to_num(posinf=math.inf).max())
    if breakdown is not None:
        stats.update({f"loss_{k}": v for k, v in breakdown.items()})
    if error is not None:
        stats["error"] = str(error)
    return stats


def train(
    model,
    x_train,
    y_train,
    defense: DefenseSpec,
    schedule: Schedule,
    seed: int = 0,
    sep_target: str = "mispredicted",
    optimizer=None,
    on_epoch_end: Optional[Callable[[int, object, EpochMetrics], None]] = None,
) -> Tuple[object, List[EpochMetrics]]:
    """Adversarially train ``model`` in place and return it with per-epoch metrics.

    Adversarial examples are crafted with the model in evaluation mode. Batch
    order, random starts and Gumbel noise all derive from ``seed``.
    """
    if len(x_train) == 0:
        raise ConfigurationError("training set is empty")
    torch.manual_seed(seed)
    data_gen = torch.Generator().manual_seed(seed)
    attack_gen = torch.Generator().manual_seed(seed + 1)
    optimizer = optimizer or make_optimizer(model, schedule)
    history = []
    n = len(x_train)
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=data_gen)
        sums = {"cls": 0.0, "sep": 0.0, "rec": 0.0, "total": 0.0}
        clean_correct = adv_correct = 0
        for start in range(0, n, schedule.batch_size):
            idx = perm[start : start + schedule.batch_size]
            x, y = x_train[idx], y_train[idx]
            try:
                x_adv = craft_training_examples(model, x, y, defense, attack_gen)
                model.eval()
                with torch.no_grad():
                    clean_correct += int((model(x).logits.argmax(1) == y).sum())
                model.train()
                output = model(x_adv)
                logits_nat = model(x).logits if defense.variant in ("trades", "mart") else None
            except DomainError as exc:
                # non-finite activations reach the FSR mask before any loss is formed
                raise TrainingDivergedError(
                    f"non-finite features at epoch {epoch}, batch starting at {start}",
                    _batch_diagnostics(x, y, error=exc),
                ) from exc
            loss, breakdown = total_loss(output, y, defense, logits_nat, sep_target)
            if not math.isfinite(breakdown["total"]):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting at {start}",
                    _batch_diagnostics(x_adv, y, output, breakdown),
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            adv_correct += int((output.logits.detach().argmax(1) == y).sum())
            for k in sums:
                sums[k] += breakdown[k] * len(idx)
        metrics = EpochMetrics(
            epoch=epoch + 1,
            lr=lr,
            loss_cls=sums["cls"] / n,
            loss_sep=sums["sep"] / n,
            loss_rec=sums["rec"] / n,
            loss_total=sums["total"] / n,
            clean_acc=100.0 * clean_correct / n,
            adv_acc=100.0 * adv_correct / n,
        )
        history.append(metrics)
        log.info(
            "epoch %d lr %.4g loss %.4f (cls %.4f sep %.4f rec %.4f) clean %.2f%% adv %.2f%%",
            metrics.epoch, lr, metrics.loss_total, metrics.loss_cls, metrics.loss_sep,
            metrics.loss_rec, metrics.clean_acc, metrics.adv_acc,
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, optimizer, metrics)
    model.eval()
    return model, history


def train_standard(model, x_train, y_train, schedule: Schedule, seed: int = 0):
    """Natural (non-adversarial) training with plain cross-entropy; used for calibration."""
    defense = DefenseSpec(
        variant="at", lambda_sep=0.0, lambda_rec=0.0,
        train_attack=AttackSpec(name="none", family="none", epsilon=0.0, step_size=0.0, steps=1),
    )
    return train(model, x_train, y_train, defense, schedule, seed)
