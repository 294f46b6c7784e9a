import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from fsrkit.attacks import (
    AdversarialBatch,
    AttackSpec,
    attack_battery,
    attack_dataset,
    cw_margin,
    cw_spec,
    default_eval_specs,
    fgsm,
    fgsm_spec,
    none_spec,
    pgd,
    pgd_spec,
    project,
    run_attack,
)
from fsrkit.errors import ConfigurationError
from fsrkit.models import BackboneSpec, build_model


class Linear(nn.Module):
    def __init__(self, w, b):
        super().__init__()
        self.fc = nn.Linear(w.shape[1], w.shape[0])
        with torch.no_grad():
            self.fc.weight.copy_(w)
            self.fc.bias.copy_(b)

    def forward(self, x):
        return self.fc(x.flatten(1))


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    return build_model(BackboneSpec(widths=(8, 8, 16, 16))).eval()


def test_linear_fgsm_direction_closed_form():
    # two-class linear model: d CE / dx = (p - onehot(y)) @ W, so the sign is sign(W_other - W_y)
    torch.manual_seed(0)
    w = torch.randn(2, 12)
    model = Linear(w, torch.zeros(2))
    x = torch.full((5, 12), 0.5)
    y = torch.tensor([0, 1, 0, 1, 1])
    eps = 0.03
    adv = fgsm(model, x, y, fgsm_spec(eps)).x_adv
    direction = torch.where(y.view(-1, 1) == 0, (w[1] - w[0]).sign(), (w[0] - w[1]).sign())
    assert torch.equal(adv, (x + eps * direction).clamp(0, 1))


def test_linear_cw_direction_closed_form():
    w = torch.tensor([[1.0, -2.0, 0.5], [0.0, 1.0, 3.0], [-1.0, 0.0, 0.0]])
    model = Linear(w, torch.tensor([0.0, 0.1, 0.2]))
    x = torch.tensor([[0.5, 0.5, 0.5]])
    y = torch.tensor([0])
    adv = pgd(model, x, y, AttackSpec("cw1", "cw-pgd", 0.1, 0.1, 1, False, "cw-margin")).x_adv
    # runner-up at x is class 1 (logit 2.1), so the gradient is w1 - w0
    assert torch.equal(adv, x + 0.1 * (w[1] - w[0]).sign())


def test_fgsm_equals_single_step_pgd_bitwise(desk_model):
    torch.manual_seed(1)
    x, y = torch.rand(16, 3, 32, 32), torch.randint(0, 10, (16,))
    eps = 8 / 255
    a = fgsm(desk_model, x, y, fgsm_spec(eps)).x_adv
    b = pgd(desk_model, x, y, pgd_spec(1, eps, step_size=eps)).x_adv
    assert torch.equal(a, b)


def test_budget_and_box_over_many_trials():
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for trial in range(1000):
        eps = float(torch.rand(1, generator=gen)) * 0.1
        x = torch.rand(2, 5, generator=gen)
        x[0, 0], x[1, 1] = 0.0, 1.0
        step = torch.randn(2, 5, generator=gen) * 0.5
        out = project(x + step, x, eps)
        delta = (out.double() - x.double()).abs().max().item()
        worst = max(worst, delta - eps)
        assert delta <= eps + 1e-7
        assert out.min() >= 0 and out.max() <= 1
    assert worst <= 1e-7


def test_attacks_respect_budget_on_model(desk_model):
    torch.manual_seed(2)
    x, y = torch.rand(20, 3, 32, 32), torch.randint(0, 10, (20,))
    for spec in [fgsm_spec(), pgd_spec(5, random_start=True), cw_spec(5)]:
        batch = run_attack(desk_model, x, y, spec, torch.Generator().manual_seed(0))
        assert (batch.delta_linf <= spec.epsilon + 1e-7).all()
        assert batch.x_adv.min() >= 0 and batch.x_adv.max() <= 1


def test_zero_budget_is_identity(desk_model):
    x, y = torch.rand(4, 3, 32, 32), torch.randint(0, 10, (4,))
    assert torch.equal(pgd(desk_model, x, y, pgd_spec(3, 0.0, step_size=0.01)).x_adv, x)


def test_unbounded_attack_only_clips(desk_model):
    x, y = torch.rand(4, 3, 32, 32), torch.randint(0, 10, (4,))
    adv = pgd(desk_model, x, y, pgd_spec(3, math.inf, step_size=0.5)).x_adv
    assert adv.min() >= 0 and adv.max() <= 1
    assert (adv - x).abs().max() > 0.4


def test_attack_restores_training_mode(desk_model):
    desk_model.train()
    try:
        fgsm(desk_model, torch.rand(2, 3, 32, 32), torch.tensor([0, 1]), fgsm_spec())
        assert desk_model.training
    finally:
        desk_model.eval()


def test_attacks_do_not_touch_parameter_grads(desk_model):
    desk_model.zero_grad(set_to_none=True)
    pgd(desk_model, torch.rand(2, 3, 32, 32), torch.tensor([0, 1]), pgd_spec(2))
    assert all(p.grad is None for p in desk_model.parameters())


def test_pgd_increases_loss(desk_model):
    torch.manual_seed(3)
    x, y = torch.rand(32, 3, 32, 32), torch.randint(0, 10, (32,))
    clean = F.cross_entropy(desk_model(x).logits, y)
    adv = pgd(desk_model, x, y, pgd_spec(10)).x_adv
    assert F.cross_entropy(desk_model(adv).logits, y) > clean


def test_cw_margin_values():
    logits = torch.tensor([[2.0, 5.0, 1.0], [0.0, -1.0, 3.0]])
    assert cw_margin(logits, torch.tensor([0, 2])).tolist() == [3.0, -3.0]


def test_random_start_is_seeded(desk_model):
    x, y = torch.rand(4, 3, 32, 32), torch.randint(0, 10, (4,))
    spec = pgd_spec(2, random_start=True)
    a = pgd(desk_model, x, y, spec, torch.Generator().manual_seed(5)).x_adv
    b = pgd(desk_model, x, y, spec, torch.Generator().manual_seed(5)).x_adv
    c = pgd(desk_model, x, y, spec, torch.Generator().manual_seed(6)).x_adv
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_battery_streams_align(desk_model):
    x, y = torch.rand(10, 3, 32, 32), torch.randint(0, 10, (10,))
    streams = attack_battery(desk_model, x, y, [fgsm_spec(), none_spec()], batch_size=4)
    assert [len(b.y) for b in streams["fgsm"]] == [4, 4, 2]
    for a, b in zip(streams["fgsm"], streams["natural"]):
        assert torch.equal(a.y, b.y) and torch.equal(a.x_clean, b.x_clean)
    whole = attack_dataset(desk_model, x, y, fgsm_spec(), batch_size=4)
    assert isinstance(whole, AdversarialBatch) and whole.x_adv.shape == x.shape


def test_battery_errors(desk_model):
    x, y = torch.rand(2, 3, 32, 32), torch.tensor([0, 1])
    with pytest.raises(ConfigurationError):
        attack_battery(desk_model, x, y, [])
    with pytest.raises(ConfigurationError):
        attack_battery(desk_model, x, y, [fgsm_spec(), fgsm_spec()])
    with pytest.raises(ConfigurationError):
        attack_battery(desk_model, x[:0], y[:0], [fgsm_spec()])


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        AttackSpec(family="deepfool")
    with pytest.raises(ConfigurationError):
        AttackSpec(epsilon=-1)
    with pytest.raises(ConfigurationError):
        AttackSpec(steps=0)
    with pytest.raises(ConfigurationError):
        AttackSpec(family="fgsm", steps=3)
    with pytest.raises(ConfigurationError):
        AttackSpec(family="cw-pgd", loss="cross-entropy")
    names = [s.name for s in default_eval_specs()]
    assert names == ["fgsm", "pgd-20", "pgd-100", "cw"]
