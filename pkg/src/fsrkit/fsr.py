"""Feature Separation and Recalibration layer.

The layer scores every activation of an intermediate feature map with a
Separation Net, turns the scores into a soft mask through a two-way Gumbel
softmax, splits the feature into robust (``f_plus``) and non-robust
(``f_minus``) parts, and adds a masked residual from a Recalibration Net to
the non-robust part. A small auxiliary classifier provides the supervision
signals used by :func:`separation_loss` and :func:`recalibration_loss`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError

ROUTINGS = (
    "full",
    "robust-only",
    "nonrobust-only",
    "recal-only",
    "no-separation",
    "no-recalibration",
    "greedy",
    "random",
    "binary-mask",
)
SEP_TARGETS = ("mispredicted", "uniform", "entropy-max", "avg-targeted")

# Gumbel noise at the mean of Uniform(0, 1); used in inference mode.
INFERENCE_GUMBEL = -math.log(-math.log(0.5))


@dataclass
class FsrConfig:
    tau: float = 0.1
    routing: str = "full"
    sep_target: str = "mispredicted"
    num_classes: Optional[int] = None
    hidden: int = 128
    # Fraction of activations treated as non-robust by the greedy/random baselines.
    baseline_fraction: float = 0.5
    random_mask_seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.routing not in ROUTINGS:
            raise ConfigurationError(f"unknown routing {self.routing!r}; expected one of {ROUTINGS}")
        if self.sep_target not in SEP_TARGETS:
            raise ConfigurationError(
                f"unknown sep_target {self.sep_target!r}; expected one of {SEP_TARGETS}"
            )
        if self.num_classes is not None and self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden < 1:
            raise ConfigurationError(f"hidden must be >= 1, got {self.hidden}")
        if not 0.0 <= self.baseline_fraction <= 1.0:
            raise ConfigurationError(f"baseline_fraction must lie in [0, 1], got {self.baseline_fraction}")


@dataclass
class FsrForwardResult:
    """Every intermediate of one FSR forward pass.

    Head outputs are stored as logits; the ``p_*`` properties give the
    softmax probabilities and the ``log_p_*`` properties their logarithms.
    """

    f: torch.Tensor
    robustness: torch.Tensor
    mask: torch.Tensor
    f_plus: torch.Tensor
    f_minus: torch.Tensor
    f_minus_recal: torch.Tensor
    f_out: torch.Tensor
    logits_plus: torch.Tensor
    logits_minus: torch.Tensor
    logits_minus_recal: torch.Tensor
    routing: str

    @property
    def mask_minus(self):
        return 1 - self.mask

    @property
    def p_plus(self):
        return F.softmax(self.logits_plus, dim=1)

    @property
    def p_minus(self):
        return F.softmax(self.logits_minus, dim=1)

    @property
    def p_minus_recal(self):
        return F.softmax(self.logits_minus_recal, dim=1)

    @property
    def log_p_plus(self):
        return F.log_softmax(self.logits_plus, dim=1)

    @property
    def log_p_minus(self):
        return F.log_softmax(self.logits_minus, dim=1)

    @property
    def log_p_minus_recal(self):
        return F.log_softmax(self.logits_minus_recal, dim=1)

    @property
    def uses_separation_loss(self):
        # Fixed masks have no Separation Net to supervise; no-separation has no f_plus.
        return self.routing not in ("no-separation", "greedy", "random")

    @property
    def uses_recalibration_loss(self):
        return self.routing != "no-recalibration"


def _check_channels(f, channels, who):
    if f.dim() != 4:
        raise ConfigurationError(f"{who} expects a [B, C, H, W] feature map, got shape {tuple(f.shape)}")
    if f.shape[1] != channels:
        raise ConfigurationError(
            f"{who} configured for {channels} channels but received {f.shape[1]} channels"
        )


def _conv_bn_relu(channels):
    return nn.Sequential(
        nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        nn.BatchNorm2d(channels),
        nn.ReLU(inplace=False),
    )


class SeparationNet(nn.Module):
    """Two conv-bn-relu blocks followed by a single 3x3 convolution.

    Emits an unbounded robustness score per activation, same shape as the input.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(
            _conv_bn_relu(channels),
            _conv_bn_relu(channels),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, f):
        _check_channels(f, self.channels, "SeparationNet")
        return self.body(f)


class RecalibrationNet(nn.Module):
    """Three conv-bn-relu blocks producing the recalibrating units."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(*[_conv_bn_relu(channels) for _ in range(3)])

    def forward(self, f):
        _check_channels(f, self.channels, "RecalibrationNet")
        return self.body(f)


class AuxiliaryHead(nn.Module):
    """Global average pool, one hidden ReLU layer, linear to class logits."""

    def __init__(self, channels, num_classes, hidden=128):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, f):
        _check_channels(f, self.channels, "AuxiliaryHead")
        pooled = f.mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(pooled)))


def separation_net_forward(f, net):
    return net(f)


def auxiliary_head(f, head):
    """Class probabilities of the auxiliary head for feature map ``f``."""
    return F.softmax(head(f), dim=1)


def _sample_gumbel(shape, dtype, device, generator=None):
    u = torch.rand(shape, dtype=dtype, device=device, generator=generator)
    tiny = torch.finfo(dtype).tiny
    u = u.clamp(min=tiny, max=1 - torch.finfo(dtype).eps)
    return -torch.log(-torch.log(u))


def gumbel_soft_mask(r, tau, mode="inference", generator=None, g1=None, g2=None):
    """Two-way Gumbel softmax between ``sigmoid(r)`` and ``1 - sigmoid(r)``.

    ``mode`` is ``"train"`` (fresh Gumbel noise per entry) or ``"inference"``
    (noise fixed at the value for u = 0.5, so the result equals
    ``sigmoid(r / tau)``). Explicit ``g1``/``g2`` override sampling.
    """
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if not torch.isfinite(r).all():
        raise DomainError("robustness map contains non-finite values")
    if mode not in ("train", "inference"):
        raise DomainError(f"unknown mask mode {mode!r}")
    if g1 is None or g2 is None:
        if mode == "train":
            g1 = _sample_gumbel(r.shape, r.dtype, r.device, generator)
            g2 = _sample_gumbel(r.shape, r.dtype, r.device, generator)
        else:
            g1 = g2 = INFERENCE_GUMBEL
    # log(1 - sigmoid(r)) == logsigmoid(-r); the softmax over two logits is a
    # sigmoid of their difference, which never overflows.
    a = (F.logsigmoid(r) + g1) / tau
    b = (F.logsigmoid(-r) + g2) / tau
    return torch.sigmoid(a - b)


def binary_mask(r, threshold=0.5):
    """Hard mask: 1 where ``sigmoid(r) >= threshold`` else 0. Carries no gradient."""
    if not torch.isfinite(r).all():
        raise DomainError("robustness map contains non-finite values")
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    # sigmoid(r) >= t  <=>  r >= logit(t); comparing in logit space avoids
    # sigmoid rounding to exactly t for tiny negative r.
    cut = math.log(threshold / (1.0 - threshold))
    return (r.detach() >= cut).to(r.dtype)


def greedy_mask(f, fraction):
    """Mask whose complement marks the ``fraction`` smallest-magnitude activations per example."""
    flat = f.detach().abs().flatten(1)
    n = flat.shape[1]
    k = int(round(fraction * n))
    mask_minus = torch.zeros_like(flat)
    if k > 0:
        idx = torch.argsort(flat, dim=1, stable=True)[:, :k]
        mask_minus.scatter_(1, idx, 1.0)
    return (1 - mask_minus).view_as(f)


def random_mask(f, fraction, generator=None):
    """Mask whose complement marks a uniformly random ``fraction`` of activations per example."""
    b = f.shape[0]
    n = f[0].numel()
    k = int(round(fraction * n))
    scores = torch.rand((b, n), generator=generator, dtype=torch.float64)
    mask_minus = torch.zeros((b, n), dtype=f.dtype, device=f.device)
    if k > 0:
        idx = torch.argsort(scores, dim=1)[:, :k].to(f.device)
        mask_minus.scatter_(1, idx, 1.0)
    return (1 - mask_minus).view_as(f)


def separate(f, m):
    """Split ``f`` into ``(m * f, (1 - m) * f)``."""
    if f.shape != m.shape:
        raise ConfigurationError(f"mask shape {tuple(m.shape)} does not match feature shape {tuple(f.shape)}")
    f_plus = _snap_to_ulp_grid(m * f, f)
    # Both terms are multiples of ulp(f) and bounded by |f|, so this
    # subtraction and the sum f_plus + f_minus are exact.
    f_minus = f - f_plus
    return f_plus, f_minus


_MANTISSA_BITS = {torch.float16: 11, torch.bfloat16: 8, torch.float32: 24, torch.float64: 53}


def _snap_to_ulp_grid(x, ref):
    """Round ``x`` to the nearest multiple of ulp(``ref``); gradient passes straight through."""
    if not x.dtype.is_floating_point:
        return x
    _, exponent = torch.frexp(ref.detach())
    ulp = torch.ldexp(torch.ones_like(ref), exponent - _MANTISSA_BITS[ref.dtype])
    snapped = torch.round(x.detach() / ulp) * ulp
    return x + (snapped - x).detach()


def recalibrate(f_minus, m_minus, net):
    """``f_minus + m_minus * R(f_minus)``."""
    if f_minus.shape != m_minus.shape:
        raise ConfigurationError(
            f"mask shape {tuple(m_minus.shape)} does not match feature shape {tuple(f_minus.shape)}"
        )
    return f_minus + m_minus * net(f_minus)


class FSR(nn.Module):
    """Feature Separation and Recalibration layer for a ``channels``-wide feature map.

    The module is stochastic in training mode (Gumbel noise) and a pure
    function of its input in evaluation mode. ``routing`` may be changed on
    a trained module to re-route which feature is passed downstream.
    """

    def __init__(self, channels, num_classes, cfg=None):
        super().__init__()
        cfg = cfg or FsrConfig()
        if cfg.num_classes is not None and cfg.num_classes != num_classes:
            raise ConfigurationError(
                f"FsrConfig.num_classes={cfg.num_classes} disagrees with num_classes={num_classes}"
            )
        self.channels = channels
        self.num_classes = num_classes
        self.tau = cfg.tau
        self.routing = cfg.routing
        self.baseline_fraction = cfg.baseline_fraction
        self.random_mask_seed = cfg.random_mask_seed
        self.separation = SeparationNet(channels)
        self.recalibration = RecalibrationNet(channels)
        self.head = AuxiliaryHead(channels, num_classes, cfg.hidden)

    def make_mask(self, f, r):
        routing = self.routing
        if routing == "binary-mask":
            return binary_mask(r)
        if routing == "no-separation":
            return torch.zeros_like(f)
        if routing == "greedy":
            return greedy_mask(f, self.baseline_fraction)
        if routing == "random":
            gen = None if self.training else torch.Generator().manual_seed(self.random_mask_seed)
            return random_mask(f, self.baseline_fraction, gen)
        mode = "train" if self.training else "inference"
        return gumbel_soft_mask(r, self.tau, mode)

    def forward(self, f):
        if self.routing not in ROUTINGS:
            raise ConfigurationError(f"unknown routing {self.routing!r}")
        _check_channels(f, self.channels, "FSR")
        r = self.separation(f)
        m = self.make_mask(f, r)
        f_plus, f_minus = separate(f, m)
        if self.routing == "no-recalibration":
            f_minus_recal = f_minus
        else:
            f_minus_recal = recalibrate(f_minus, 1 - m, self.recalibration)
        f_out = {
            "robust-only": f_plus,
            "no-recalibration": f_plus,
            "nonrobust-only": f_minus,
            "recal-only": f_minus_recal,
        }.get(self.routing)
        if f_out is None:
            f_out = f_plus + f_minus_recal
        return FsrForwardResult(
            f=f,
            robustness=r,
            mask=m,
            f_plus=f_plus,
            f_minus=f_minus,
            f_minus_recal=f_minus_recal,
            f_out=f_out,
            logits_plus=self.head(f_plus),
            logits_minus=self.head(f_minus),
            logits_minus_recal=self.head(f_minus_recal),
            routing=self.routing,
        )


def fsr_forward(f, module, routing=None):
    """Run ``module`` on ``f``, optionally with a temporary routing override."""
    if routing is None:
        return module(f)
    previous = module.routing
    module.routing = routing
    try:
        return module(f)
    finally:
        module.routing = previous


def _check_labels(y, n):
    if n < 2:
        raise DomainError(f"need at least 2 classes, got {n}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n):
        raise DomainError(f"labels must lie in [0, {n - 1}], got range [{int(y.min())}, {int(y.max())}]")


def _as_log(p, log_probs):
    return p if log_probs else torch.log(p)


def wrong_class_target(final_logits, y):
    """Highest-scoring class other than ``y``; no gradient flows through the choice."""
    scores = final_logits.detach().clone()
    scores.scatter_(1, y.view(-1, 1), float("-inf"))
    return scores.argmax(dim=1)


def separation_loss(p_plus, p_minus, y, final_logits=None, sep_target="mispredicted", log_probs=False):
    """Batch-mean separation loss.

    ``p_plus`` is pushed towards the true label. The non-robust prediction
    ``p_minus`` is pushed, depending on ``sep_target``, towards the most
    likely wrong class of ``final_logits`` (``mispredicted``), towards the
    uniform distribution (``uniform``), towards maximum entropy
    (``entropy-max``), or towards every wrong class on average
    (``avg-targeted``). Pass log-probabilities with ``log_probs=True``.
    """
    n = p_plus.shape[1]
    _check_labels(y, n)
    if sep_target not in SEP_TARGETS:
        raise DomainError(f"unknown sep_target {sep_target!r}")
    lp_plus = _as_log(p_plus, log_probs)
    robust_term = -lp_plus.gather(1, y.view(-1, 1)).squeeze(1)

    if sep_target == "mispredicted":
        if final_logits is None:
            raise DomainError("mispredicted sep_target needs the final logits")
        y_wrong = wrong_class_target(final_logits, y)
        lp_minus = _as_log(p_minus, log_probs)
        nonrobust_term = -lp_minus.gather(1, y_wrong.view(-1, 1)).squeeze(1)
    elif sep_target == "uniform":
        nonrobust_term = -_as_log(p_minus, log_probs).mean(dim=1)
    elif sep_target == "entropy-max":
        if log_probs:
            nonrobust_term = (p_minus.exp() * p_minus).sum(dim=1)
        else:
            nonrobust_term = torch.special.xlogy(p_minus, p_minus).sum(dim=1)
    else:
        lp_minus = _as_log(p_minus, log_probs)
        wrong = torch.ones_like(lp_minus, dtype=torch.bool)
        wrong.scatter_(1, y.view(-1, 1), False)
        nonrobust_term = -lp_minus.masked_fill(~wrong, 0.0).sum(dim=1) / (n - 1)
    return (robust_term + nonrobust_term).mean()


def recalibration_loss(p_minus_recal, y, log_probs=False):
    """Batch-mean cross-entropy of the recalibrated prediction against ``y``."""
    _check_labels(y, p_minus_recal.shape[1])
    lp = _as_log(p_minus_recal, log_probs)
    return -lp.gather(1, y.view(-1, 1)).mean()
