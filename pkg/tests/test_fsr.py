import math

import mpmath
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zero_
from fsrkit.errors import ConfigurationError, DomainError
from fsrkit.fsr import (
    FSR,
    INFERENCE_GUMBEL,
    AuxiliaryHead,
    FsrConfig,
    RecalibrationNet,
    SeparationNet,
    auxiliary_head,
    binary_mask,
    fsr_forward,
    greedy_mask,
    gumbel_soft_mask,
    random_mask,
    recalibrate,
    recalibration_loss,
    separate,
    separation_loss,
)

mpmath.mp.dps = 50


def eq2_mp(r, tau, g1=INFERENCE_GUMBEL, g2=INFERENCE_GUMBEL):
    """Direct high-precision evaluation of the two-way Gumbel softmax."""
    r, tau = mpmath.mpf(r), mpmath.mpf(tau)
    s = 1 / (1 + mpmath.exp(-r))
    a = mpmath.exp((mpmath.log(s) + g1) / tau)
    b = mpmath.exp((mpmath.log(1 - s) + g2) / tau)
    return a / (a + b)


# --- Separation Net -----------------------------------------------------------


def test_separation_net_zero_weights_gives_bias_map():
    net = SeparationNet(4).eval()
    zero_(net)
    with torch.no_grad():
        net.body[-1].bias.copy_(torch.tensor([0.5, -1.0, 2.0, 0.0]))
    r = net(torch.randn(2, 4, 5, 5))
    expected = torch.tensor([0.5, -1.0, 2.0, 0.0]).view(1, 4, 1, 1).expand(2, 4, 5, 5)
    assert torch.equal(r, expected)


def test_separation_net_shape_and_determinism():
    torch.manual_seed(1)
    net = SeparationNet(64).eval()
    f = torch.randn(2, 64, 8, 8)
    r1, r2 = net(f), net(f)
    assert r1.shape == (2, 64, 8, 8)
    assert torch.equal(r1, r2)


def test_separation_net_channel_mismatch_names_counts():
    net = SeparationNet(16)
    with pytest.raises(ConfigurationError, match="16 channels but received 8"):
        net(torch.randn(1, 8, 4, 4))


def test_separation_net_is_differentiable():
    net = SeparationNet(4)
    f = torch.randn(2, 4, 3, 3, requires_grad=True)
    net(f).sum().backward()
    assert f.grad.abs().sum() > 0
    assert all(p.grad is not None for p in net.parameters())


# --- masks --------------------------------------------------------------------


def test_mask_zero_scores_is_half():
    m = gumbel_soft_mask(torch.zeros(2, 3, 4, 4), 0.1)
    assert torch.equal(m, torch.full_like(m, 0.5))


def test_mask_numeric_instance():
    m = gumbel_soft_mask(torch.tensor([1.0], dtype=torch.float64), 0.1)
    assert float(m) == pytest.approx(float(eq2_mp(1.0, 0.1)), abs=1e-12)
    assert float(m) == pytest.approx(0.9999546, abs=1e-7)


@pytest.mark.parametrize("tau", [0.05, 0.1, 1.0, 3.0])
def test_inference_mask_matches_high_precision_eq2(tau):
    r = torch.linspace(-12, 12, 97, dtype=torch.float64)
    m = gumbel_soft_mask(r, tau)
    oracle = torch.tensor([float(eq2_mp(float(v), tau)) for v in r], dtype=torch.float64)
    assert torch.allclose(m, oracle, atol=1e-12, rtol=0)
    assert torch.allclose(m, torch.sigmoid(r / tau), atol=1e-12, rtol=0)


def test_train_mode_with_equal_noise_equals_inference():
    torch.manual_seed(0)
    r = torch.randn(3, 4, 2, 2)
    g = torch.randn(3, 4, 2, 2)
    m_train = gumbel_soft_mask(r, 0.1, mode="train", g1=g, g2=g)
    m_inf = gumbel_soft_mask(r, 0.1, mode="inference")
    assert torch.allclose(m_train, m_inf, atol=1e-6)


def test_train_mode_with_explicit_noise_matches_eq2():
    r = torch.tensor([0.3, -2.0, 4.0], dtype=torch.float64)
    g1 = torch.tensor([0.1, 1.5, -0.7], dtype=torch.float64)
    g2 = torch.tensor([-0.4, 0.2, 2.2], dtype=torch.float64)
    m = gumbel_soft_mask(r, 0.5, mode="train", g1=g1, g2=g2)
    oracle = [float(eq2_mp(float(a), 0.5, float(b), float(c))) for a, b, c in zip(r, g1, g2)]
    assert m.tolist() == pytest.approx(oracle, abs=1e-12)


def test_train_mode_is_stochastic_and_seeded():
    r = torch.zeros(1000)
    gen = torch.Generator().manual_seed(3)
    a = gumbel_soft_mask(r, 0.1, mode="train", generator=gen)
    b = gumbel_soft_mask(r, 0.1, mode="train", generator=gen)
    c = gumbel_soft_mask(r, 0.1, mode="train", generator=torch.Generator().manual_seed(3))
    assert not torch.equal(a, b)
    assert torch.equal(a, c)
    assert ((a >= 0) & (a <= 1)).all()


def test_mask_is_stable_for_large_scores():
    r = torch.tensor([-1e4, -50.0, 50.0, 1e4])
    for mode in ("train", "inference"):
        m = gumbel_soft_mask(r, 0.1, mode=mode, generator=torch.Generator().manual_seed(0))
        assert torch.isfinite(m).all()
        assert m[0] < 1e-6 and m[-1] > 1 - 1e-6


def test_mask_gradient_flows_to_scores():
    r = torch.randn(10, requires_grad=True)
    gumbel_soft_mask(r, 1.0).sum().backward()
    assert (r.grad > 0).all()


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_mask_rejects_bad_tau(tau):
    with pytest.raises(DomainError):
        gumbel_soft_mask(torch.zeros(3), tau)


def test_mask_rejects_non_finite_scores():
    with pytest.raises(DomainError):
        gumbel_soft_mask(torch.tensor([0.0, float("nan")]), 0.1)
    with pytest.raises(DomainError):
        binary_mask(torch.tensor([float("inf")]))


def test_binary_mask_examples():
    assert binary_mask(torch.zeros(1)).item() == 1.0
    assert binary_mask(torch.tensor([-3.0])).item() == 0.0
    assert binary_mask(torch.tensor([3.0])).item() == 1.0
    torch.manual_seed(0)
    r = torch.randn(4, 5, 6)
    assert torch.equal(binary_mask(r), (r >= 0).float())


def test_binary_mask_tiny_negative_scores_are_zero():
    r = torch.tensor([-1e-9, -1e-30, 0.0, 1e-30])
    assert binary_mask(r).tolist() == [0.0, 0.0, 1.0, 1.0]


def test_binary_mask_has_zero_gradient():
    r = torch.randn(5, requires_grad=True)
    m = binary_mask(r)
    assert not m.requires_grad


def test_greedy_mask_marks_smallest_magnitudes():
    f = torch.tensor([[[[0.1, -5.0], [2.0, -0.3]]]])
    m = greedy_mask(f, 0.5)
    assert m.tolist() == [[[[0.0, 1.0], [1.0, 0.0]]]]


def test_random_mask_fraction_and_seed():
    f = torch.randn(3, 4, 5, 5)
    m1 = random_mask(f, 0.3, torch.Generator().manual_seed(1))
    m2 = random_mask(f, 0.3, torch.Generator().manual_seed(1))
    assert torch.equal(m1, m2)
    assert ((1 - m1).flatten(1).sum(1) == round(0.3 * 100)).all()


# --- separation / recalibration ------------------------------------------------


def test_separate_identity_mask():
    f = torch.randn(2, 3, 4, 4)
    f_plus, f_minus = separate(f, torch.ones_like(f))
    assert torch.equal(f_plus, f)
    assert torch.equal(f_minus, torch.zeros_like(f))


def test_separate_symmetric_split():
    f = 2 * torch.ones(2, 3, 4, 4)
    f_plus, f_minus = separate(f, torch.full_like(f, 0.5))
    assert torch.equal(f_plus, torch.ones_like(f))
    assert torch.equal(f_minus, torch.ones_like(f))


def test_separate_shape_mismatch():
    with pytest.raises(ConfigurationError):
        separate(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))


def test_separate_matches_mask_products_to_half_ulp():
    torch.manual_seed(0)
    f = torch.randn(4, 8, 5, 5) * 100
    m = torch.rand_like(f)
    f_plus, f_minus = separate(f, m)
    ulp = torch.finfo(torch.float32).eps * f.abs()
    assert ((f_plus - m * f).abs() <= ulp).all()
    assert ((f_minus - (1 - m) * f).abs() <= 2 * ulp).all()


def test_recalibrate_zero_net_is_identity():
    net = zero_(RecalibrationNet(4))
    f_minus = torch.randn(2, 4, 3, 3)
    out = recalibrate(f_minus, torch.rand_like(f_minus), net)
    assert torch.equal(out, f_minus)


def test_recalibrate_zero_mask_ignores_net():
    torch.manual_seed(0)
    net = RecalibrationNet(4)
    f_minus = torch.randn(2, 4, 3, 3)
    assert torch.equal(recalibrate(f_minus, torch.zeros_like(f_minus), net), f_minus)


def test_recalibrate_finite_differences():
    torch.manual_seed(0)
    net = RecalibrationNet(8).double().eval()
    # non-trivial running statistics so eval-mode batch norm is not the identity
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.1, 0.1)
            m.running_var.uniform_(0.5, 1.5)
    f_minus = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    m_minus = torch.rand_like(f_minus)
    weights = torch.randn(1, 8, 4, 4, dtype=torch.float64)

    def objective():
        return (recalibrate(f_minus, m_minus, net) * weights).sum()

    params = list(net.parameters())
    grads = torch.autograd.grad(objective(), params)
    gen = torch.Generator().manual_seed(0)
    h = 1e-6
    checked = 0
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in torch.randperm(flat.numel(), generator=gen)[:3].tolist():
            orig = flat[i].item()
            flat[i] = orig + h
            up = objective().item()
            flat[i] = orig - h
            down = objective().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = gflat[i].item()
            assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8
            checked += 1
    assert checked >= 20


# --- auxiliary head -------------------------------------------------------------


def test_auxiliary_head_zero_weights_uniform():
    head = zero_(AuxiliaryHead(8, 10))
    p = auxiliary_head(torch.randn(3, 8, 4, 4), head)
    assert torch.allclose(p, torch.full((3, 10), 0.1))


def test_auxiliary_head_rows_sum_to_one_and_ignore_spatial_order():
    torch.manual_seed(0)
    head = AuxiliaryHead(8, 10)
    f = torch.randn(5, 8, 4, 4)
    p = auxiliary_head(f, head)
    assert torch.allclose(p.sum(1), torch.ones(5), atol=1e-5)
    assert (p >= 0).all()
    perm = torch.randperm(16)
    shuffled = f.flatten(2)[:, :, perm].view_as(f)
    assert torch.allclose(auxiliary_head(shuffled, head), p, atol=1e-6)


def test_class_count_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        FSR(8, 10, FsrConfig(num_classes=5))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FsrConfig(tau=0)
    with pytest.raises(ConfigurationError):
        FsrConfig(routing="sideways")
    with pytest.raises(ConfigurationError):
        FsrConfig(sep_target="whatever")


# --- full forward ---------------------------------------------------------------


def test_full_routing_with_zero_recalibration_is_identity(fsr_layer):
    zero_(fsr_layer.recalibration)
    f = torch.randn(2, 8, 4, 4)
    res = fsr_layer(f)
    assert torch.equal(res.f_out, f)
    assert torch.equal(res.f_plus + res.f_minus, f)


def test_robust_only_equals_no_recalibration(fsr_layer):
    f = torch.randn(2, 8, 4, 4)
    a = fsr_forward(f, fsr_layer, "robust-only")
    b = fsr_forward(f, fsr_layer, "no-recalibration")
    assert torch.equal(a.f_out, b.f_out)
    assert torch.equal(a.f_out, a.f_plus)
    assert fsr_layer.routing == "full"


def test_full_routing_equals_manual_composition(fsr_layer):
    f = torch.randn(2, 8, 4, 4)
    res = fsr_layer(f)
    r = fsr_layer.separation(f)
    m = gumbel_soft_mask(r, fsr_layer.tau)
    f_plus, f_minus = separate(f, m)
    f_rec = recalibrate(f_minus, 1 - m, fsr_layer.recalibration)
    assert torch.equal(res.robustness, r)
    assert torch.equal(res.mask, m)
    assert torch.equal(res.f_out, f_plus + f_rec)
    assert torch.equal(res.p_minus_recal, auxiliary_head(f_rec, fsr_layer.head))


def test_routing_outputs(fsr_layer):
    f = torch.randn(2, 8, 4, 4)
    full = fsr_layer(f)
    assert torch.equal(fsr_forward(f, fsr_layer, "nonrobust-only").f_out, full.f_minus)
    assert torch.equal(fsr_forward(f, fsr_layer, "recal-only").f_out, full.f_minus_recal)
    nosep = fsr_forward(f, fsr_layer, "no-separation")
    assert torch.equal(nosep.mask, torch.zeros_like(f))
    assert torch.equal(nosep.f_out, f + fsr_layer.recalibration(f))
    binary = fsr_forward(f, fsr_layer, "binary-mask")
    assert set(binary.mask.unique().tolist()) <= {0.0, 1.0}
    greedy = fsr_forward(f, fsr_layer, "greedy")
    assert float((1 - greedy.mask).mean()) == pytest.approx(0.5)


def test_random_routing_is_deterministic_in_eval(fsr_layer):
    f = torch.randn(2, 8, 4, 4)
    a = fsr_forward(f, fsr_layer, "random")
    b = fsr_forward(f, fsr_layer, "random")
    assert torch.equal(a.f_out, b.f_out)


def test_unknown_routing_rejected(fsr_layer):
    fsr_layer.routing = "bogus"
    with pytest.raises(ConfigurationError):
        fsr_layer(torch.randn(1, 8, 4, 4))


def test_inference_forward_is_deterministic(fsr_layer):
    f = torch.randn(3, 8, 4, 4)
    assert torch.equal(fsr_layer(f).f_out, fsr_layer(f).f_out)


def test_training_forward_samples_noise():
    torch.manual_seed(0)
    layer = FSR(8, 10).train()
    f = torch.randn(3, 8, 4, 4)
    assert not torch.equal(layer(f).mask, layer(f).mask)


def test_probabilities_are_valid(fsr_layer):
    res = fsr_layer(torch.randn(4, 8, 4, 4))
    for p in (res.p_plus, res.p_minus, res.p_minus_recal):
        assert torch.allclose(p.sum(1), torch.ones(4), atol=1e-5)
        assert (p >= 0).all()


# --- losses ---------------------------------------------------------------------


def one_hot(idx, n=10):
    return F.one_hot(torch.tensor(idx), n).double()


def test_separation_loss_perfect_agreement_is_zero():
    y = torch.tensor([2, 7])
    logits = torch.zeros(2, 10)
    logits[0, 5] = 3.0
    logits[1, 1] = 3.0
    loss = separation_loss(one_hot([2, 7]), one_hot([5, 1]), y, logits)
    assert loss.item() == 0.0


def test_separation_loss_uniform_plus():
    y = torch.tensor([0])
    logits = torch.tensor([[0.0, 5.0] + [0.0] * 8])
    loss = separation_loss(torch.full((1, 10), 0.1, dtype=torch.float64), one_hot([1]), y, logits)
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def _hand_batch():
    p_plus = torch.tensor(
        [[0.7, 0.2, 0.1, 0.0 + 1e-9], [0.1, 0.6, 0.2, 0.1], [0.25, 0.25, 0.25, 0.25]], dtype=torch.float64
    )
    p_plus = p_plus / p_plus.sum(1, keepdim=True)
    p_minus = torch.tensor([[0.1, 0.5, 0.3, 0.1], [0.4, 0.1, 0.1, 0.4], [0.05, 0.15, 0.3, 0.5]], dtype=torch.float64)
    y = torch.tensor([0, 1, 3])
    final = torch.tensor([[5.0, 1.0, 2.0, 0.5], [0.0, 3.0, -1.0, 2.5], [1.0, 4.0, 0.0, 4.5]])
    return p_plus, p_minus, y, final


def _sep_oracle(p_plus, p_minus, y, final, target):
    total = 0.0
    n = len(p_plus[0])
    for b in range(len(y)):
        yb = int(y[b])
        term = -math.log(float(p_plus[b][yb]))
        if target == "mispredicted":
            best, arg = -math.inf, None
            for c in range(n):
                if c != yb and float(final[b][c]) > best:
                    best, arg = float(final[b][c]), c
            term += -math.log(float(p_minus[b][arg]))
        elif target == "uniform":
            term += -sum(math.log(float(p_minus[b][c])) / n for c in range(n))
        elif target == "entropy-max":
            term += sum(float(p_minus[b][c]) * math.log(float(p_minus[b][c])) for c in range(n))
        else:
            term += -sum(math.log(float(p_minus[b][c])) for c in range(n) if c != yb) / (n - 1)
        total += term
    return total / len(y)


@pytest.mark.parametrize("target", ["mispredicted", "uniform", "entropy-max", "avg-targeted"])
def test_separation_loss_matches_scalar_loop(target):
    p_plus, p_minus, y, final = _hand_batch()
    got = separation_loss(p_plus, p_minus, y, final, target).item()
    want = _sep_oracle(p_plus, p_minus, y, final, target)
    assert got == pytest.approx(want, rel=1e-6)
    got_log = separation_loss(p_plus.log(), p_minus.log(), y, final, target, log_probs=True).item()
    assert got_log == pytest.approx(want, rel=1e-6)


def test_separation_loss_ignores_gradient_through_target():
    p_plus, p_minus, y, final = _hand_batch()
    final = final.clone().requires_grad_(True)
    loss = separation_loss(p_plus, p_minus, y, final)
    assert not loss.requires_grad


def test_separation_loss_errors():
    p = torch.full((1, 3), 1 / 3)
    with pytest.raises(DomainError):
        separation_loss(p, p, torch.tensor([3]), torch.zeros(1, 3))
    with pytest.raises(DomainError):
        separation_loss(torch.ones(1, 1), torch.ones(1, 1), torch.tensor([0]), torch.zeros(1, 1))


def test_recalibration_loss_examples():
    assert recalibration_loss(one_hot([3, 4]), torch.tensor([3, 4])).item() == 0.0
    uniform = torch.full((2, 10), 0.1, dtype=torch.float64)
    assert recalibration_loss(uniform, torch.tensor([0, 9])).item() == pytest.approx(math.log(10))
    p_plus, _, y, _ = _hand_batch()
    want = sum(-math.log(float(p_plus[b][int(y[b])])) for b in range(3)) / 3
    assert recalibration_loss(p_plus, y).item() == pytest.approx(want, rel=1e-6)
    with pytest.raises(DomainError):
        recalibration_loss(uniform, torch.tensor([0, 10]))


# --- properties -----------------------------------------------------------------

finite = st.floats(-30, 30, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=1, max_size=64), st.floats(0.01, 10.0))
def test_property_inference_mask_closed_form(values, tau):
    r = torch.tensor(values)
    m = gumbel_soft_mask(r, tau)
    assert torch.allclose(m, torch.sigmoid(r / tau), atol=1e-6, rtol=0)
    assert torch.equal(m + (1 - m), torch.ones_like(m))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["train", "inference"]), st.floats(0.05, 5.0))
def test_property_complementarity_and_reconstruction(seed, mode, tau):
    gen = torch.Generator().manual_seed(seed)
    f = torch.randn(2, 3, 4, 4, generator=gen) * 10
    r = torch.randn(2, 3, 4, 4, generator=gen) * 5
    m = gumbel_soft_mask(r, tau, mode=mode, generator=gen)
    assert ((m >= 0) & (m <= 1)).all()
    assert torch.equal(m + (1 - m), torch.ones_like(m))
    f_plus, f_minus = separate(f, m)
    assert torch.equal(f_plus + f_minus, f)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["mispredicted", "uniform", "avg-targeted"]))
def test_property_losses_non_negative(seed, target):
    gen = torch.Generator().manual_seed(seed)
    n = 2 + seed % 9
    p_plus = torch.softmax(torch.randn(4, n, generator=gen) * 4, 1)
    p_minus = torch.softmax(torch.randn(4, n, generator=gen) * 4, 1)
    y = torch.randint(0, n, (4,), generator=gen)
    final = torch.randn(4, n, generator=gen)
    assert separation_loss(p_plus, p_minus, y, final, target).item() >= 0
    assert recalibration_loss(p_plus, y).item() >= 0


def test_temperature_limits():
    torch.manual_seed(0)
    r = torch.empty(10000).uniform_(-3, 3)
    r = r[r.abs() > 0.01]
    cold = gumbel_soft_mask(r, 1e-3)
    assert (cold - binary_mask(r)).abs().max() < 1e-3
    hot = gumbel_soft_mask(r, 1e3)
    assert (hot - 0.5).abs().max() < 1e-3
