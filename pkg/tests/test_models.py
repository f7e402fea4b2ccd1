import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from odecut.diffcore import ShapeError, count_params
from odecut.models import (
    Bottleneck,
    ConfigError,
    Generator,
    GeneratorConfig,
    OdeBlock,
    PatchDiscriminator,
    ProjectionHead,
    SamplingError,
    generator_param_count,
    sample_patches,
)
from odecut.odeint import Method, SolverConfig
from odecut.verify import ODE_PARAMS, RESNET9_PARAMS

SMALL = GeneratorConfig(base_channels=4, solver=SolverConfig(method=Method.RK4, fixed_step=0.5))


def test_parameter_goldens():
    ode = generator_param_count(GeneratorConfig())
    base = generator_param_count(GeneratorConfig(bottleneck_kind="resnet"))
    assert ode == ODE_PARAMS == 5_477_379
    assert base == RESNET9_PARAMS == 11_378_179
    assert round(ode / 1e6, 3) == 5.477 and round(base / 1e6, 3) == 11.378
    assert abs(ode / base - 0.4814) <= 1e-4


def test_count_without_and_with_allocation_agree():
    assert generator_param_count(SMALL) == count_params(Generator(SMALL))


def test_canonical_discriminator_shape_and_size():
    with torch.device("meta"):
        d = PatchDiscriminator(6, 64)
        assert count_params(d) == 2_767_809
        assert d(torch.zeros(1, 6, 256, 256)).shape == (1, 1, 30, 30)
    assert PatchDiscriminator(3, 8)(torch.zeros(2, 3, 32, 32)).shape == (2, 1, 2, 2)


def test_forward_shape_and_range():
    torch.manual_seed(0)
    g = Generator(SMALL)
    x = torch.rand(2, 3, 16, 24) * 2 - 1
    y = g(x)
    assert y.shape == x.shape
    assert float(y.detach().abs().max()) <= 1.0


def test_resnet_bottleneck_forward():
    g = Generator(GeneratorConfig(base_channels=4, bottleneck_kind=Bottleneck.RESNET, resnet_blocks=2))
    assert g(torch.zeros(1, 3, 8, 8)).shape == (1, 3, 8, 8)


def test_time_input_option_adds_one_channel():
    cfg = GeneratorConfig(base_channels=4, time_input=True, solver=SMALL.solver)
    g = Generator(cfg)
    assert g.bottleneck[0].dynamics.net[1].in_channels == 17
    assert g(torch.zeros(1, 3, 8, 8)).shape == (1, 3, 8, 8)


def test_input_validation():
    g = Generator(SMALL)
    with pytest.raises(ConfigError):
        g(torch.zeros(1, 3, 10, 8))
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 1, 8, 8))
    with pytest.raises(ConfigError):
        GeneratorConfig(ode_blocks=0)
    with pytest.raises(ConfigError):
        GeneratorConfig(time_span=(1.0, 0.0))


def test_encoder_taps():
    g = Generator(SMALL)
    x = torch.randn(2, 3, 16, 16)
    feats = g.encoder_features(x)
    assert [tuple(f.shape[1:]) for f in feats] == [(3, 16, 16), (4, 16, 16), (8, 8, 8), (16, 4, 4), (16, 4, 4)]
    assert feats[0] is x
    assert [c for c in SMALL.tap_channels()][:5] == [3, 4, 8, 16, 16]
    with pytest.raises(ConfigError):
        g.encoder_features(x, taps=[g.n_taps_available])
    # only the requested taps, in the requested order
    a, b = g.encoder_features(x, taps=[2, 1])
    assert a.shape[1] == 8 and b.shape[1] == 4


def test_bottleneck_solver_swap_and_freeze():
    g = Generator(SMALL)
    with pytest.raises(ValueError):
        g.freeze_steps()
    g.set_solver(SolverConfig(rtol=1e-4, atol=1e-6))
    x = torch.randn(1, 3, 8, 8)
    with torch.no_grad():
        y = g(x)
        g.freeze_steps()
        assert torch.equal(g(x), y)
        g.freeze_steps(False)
    assert all(isinstance(b, OdeBlock) and b.replay_steps is None for b in g.bottleneck)


def test_every_parameter_receives_gradient_except_pre_norm_biases():
    torch.manual_seed(0)
    g = Generator(SMALL)
    with torch.no_grad():
        for p in g.parameters():
            p.copy_(torch.randn(p.shape) * 0.1)
    x = torch.randn(2, 3, 16, 16)
    (g(x) ** 2).sum().backward()
    # a bias feeding a non-affine instance norm is removed by the mean subtraction
    pre_norm_bias = set()
    mods = dict(g.named_modules())
    for name, m in g.named_modules():
        if isinstance(m, nn.Sequential):
            kids = list(m.named_children())
            for (n1, a), (_, b) in zip(kids, kids[1:]):
                if isinstance(a, (nn.Conv2d, nn.ConvTranspose2d)) and isinstance(b, nn.InstanceNorm2d):
                    pre_norm_bias.add(f"{name}.{n1}.bias" if name else f"{n1}.bias")
    assert pre_norm_bias and mods
    for name, p in g.named_parameters():
        if name in pre_norm_bias:
            assert float(p.grad.abs().max()) < 1e-4
        else:
            assert float(p.grad.abs().max()) > 0, name


def test_sample_patches_shapes_norms_and_shared_indices():
    torch.manual_seed(0)
    feats = [torch.randn(2, 3, 8, 8), torch.randn(2, 5, 4, 4)]
    head = ProjectionHead([3, 5], 16)
    rng = torch.Generator().manual_seed(0)
    emb, idx = sample_patches(head, feats, 10, rng)
    assert [tuple(e.shape) for e in emb] == [(2, 10, 16), (2, 10, 16)]
    assert torch.allclose(emb[0].norm(dim=-1), torch.ones(2, 10), atol=1e-6)
    again, idx2 = sample_patches(head, feats, 10, indices=idx)
    assert all(torch.equal(a, b) for a, b in zip(idx, idx2))
    assert torch.allclose(emb[1], again[1])
    with pytest.raises(SamplingError):
        sample_patches(head, feats, 17, rng)
    with pytest.raises(SamplingError):
        sample_patches(head, feats, 4, indices=idx[:1])


def test_sample_patches_deterministic_under_seed():
    feats = [torch.randn(1, 3, 8, 8)]
    head = ProjectionHead([3], 8)
    a = sample_patches(head, feats, 5, torch.Generator().manual_seed(3))[1][0]
    b = sample_patches(head, feats, 5, torch.Generator().manual_seed(3))[1][0]
    assert torch.equal(a, b) and len(set(a.tolist())) == 5


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_output_bounded_for_any_input(seed, scale):
    torch.manual_seed(seed)
    g = Generator(SMALL)
    x = torch.randn(1, 3, 8, 8) * scale
    with torch.no_grad():
        y = g(x)
    assert torch.isfinite(y).all() and float(y.abs().max()) <= 1.0
