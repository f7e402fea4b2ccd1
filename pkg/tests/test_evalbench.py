import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from odecut.evalbench import (
    BenchReport,
    FeatureStats,
    FlopCounter,
    bench_generator,
    extract_features,
    frechet_distance,
    generator_flops,
    hardware_descriptor,
    stats_from_features,
)
from odecut.models import Bottleneck, Generator, GeneratorConfig
from odecut.odeint import Method, SolverConfig


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def frechet_oracle(a: FeatureStats, b: FeatureStats) -> float:
    # tr((S_a S_b)^(1/2)) from the eigenvalues of the non-symmetric product
    vals = np.linalg.eigvals(a.sigma @ b.sigma)
    return float(((a.mu - b.mu) ** 2).sum() + np.trace(a.sigma) + np.trace(b.sigma)
                 - 2 * np.sqrt(np.clip(vals.real, 0, None)).sum())


def test_frechet_closed_forms():
    eye = np.eye(2)
    a = FeatureStats(np.zeros(2), eye)
    b = FeatureStats(np.array([1.0, 1.0]), eye)
    assert abs(frechet_distance(a, b) - 2.0) <= 1e-6
    assert frechet_distance(a, a) < 1e-6
    # commuting covariances: sum of (sqrt a_i - sqrt b_i)^2
    c = FeatureStats(np.zeros(3), np.diag([1.0, 4.0, 9.0]))
    d = FeatureStats(np.zeros(3), np.diag([4.0, 1.0, 1.0]))
    assert frechet_distance(c, d) == pytest.approx(1 + 1 + 4, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 6))
def test_frechet_symmetric_nonnegative_and_matches_oracle(seed, d):
    rng = np.random.default_rng(seed)
    a = FeatureStats(rng.normal(size=d), random_spd(rng, d))
    b = FeatureStats(rng.normal(size=d), random_spd(rng, d))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert abs(ab - ba) <= 1e-8 * max(1.0, ab)
    assert ab >= 0
    assert ab == pytest.approx(frechet_oracle(a, b), rel=1e-6, abs=1e-8)


def test_frechet_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(FeatureStats(np.zeros(2), np.eye(2)), FeatureStats(np.zeros(3), np.eye(3)))


def test_feature_pipeline_on_images():
    g = torch.Generator().manual_seed(0)
    imgs = torch.rand(6, 3, 32, 32, generator=g) * 2 - 1
    s1, s2 = extract_features(imgs), extract_features(imgs)
    assert np.array_equal(s1.mu, s2.mu)
    assert frechet_distance(s1, s2) < 1e-6
    other = extract_features(imgs.flip(0)[:5])
    assert frechet_distance(s1, other) > 0
    with pytest.raises(ValueError):
        extract_features(imgs[:1])
    with pytest.raises(ValueError):
        extract_features(imgs[:0])


def test_stats_shrinkage_keeps_covariance_positive_definite():
    s = stats_from_features(np.ones((3, 4)))
    assert np.all(np.linalg.eigvalsh(s.sigma) > 0)


def test_conv_flop_counting_closed_form():
    conv = nn.Conv2d(3, 8, 3, padding=1)
    convt = nn.ConvTranspose2d(8, 4, 3, stride=2, padding=1, output_padding=1, bias=False)
    net = nn.Sequential(conv, convt)
    with FlopCounter(net) as fc:
        net(torch.zeros(2, 3, 5, 5))
    conv_flops = 2 * (2 * 8 * 5 * 5 * 3 * 9) + 2 * 8 * 5 * 5
    convt_flops = 2 * (2 * 8 * 5 * 5 * 4 * 9)
    assert fc.total == conv_flops + convt_flops


def test_generator_flops_split():
    size = 16
    solver = SolverConfig(method=Method.RK4, fixed_step=0.5)
    ode = Generator(GeneratorConfig(base_channels=4, solver=solver))
    res = Generator(GeneratorConfig(base_channels=4, bottleneck_kind=Bottleneck.RESNET, resnet_blocks=1))
    fo, fr = generator_flops(ode, size), generator_flops(res, size)
    state_hw = (size // 4) ** 2
    dyn = 2 * (2 * 16 * 9 * 16 * state_hw + 16 * state_hw)
    assert fo.dynamics_per_eval == dyn
    assert fo.n_evals == 4 * 2 * 4  # 4 blocks x 2 steps x 4 stages
    # a residual block has the same two convs, so the shells agree
    assert fo.shell == fr.total - dyn
    assert fr.n_evals == 0


def test_bench_report_fields():
    torch.manual_seed(0)
    g = Generator(GeneratorConfig(base_channels=4, solver=SolverConfig(method=Method.RK4, fixed_step=0.5)))
    r = bench_generator(g, image_size=16, n_warm=1, n_runs=5)
    assert r.avg_time_5 > 0 and r.avg_time_50 is None and len(r.run_times) == 5
    assert r.params == sum(p.numel() for p in g.parameters())
    assert r.flops_per_image > 0 and r.peak_memory >= 0
    assert r.hardware == hardware_descriptor() and "cpu" in r.hardware
    header = r.csv().splitlines()[0].split(",")
    assert header == list(BenchReport.COLUMNS)
    assert "Avg. Five Computation Time (s)" in r.table()
    with pytest.raises(ValueError):
        bench_generator(g, image_size=16, n_runs=7)


def test_bench_fifty_runs():
    g = Generator(GeneratorConfig(base_channels=2, bottleneck_kind="resnet", resnet_blocks=1))
    r = bench_generator(g, image_size=8, n_warm=0, n_runs=50)
    assert len(r.run_times) == 50 and r.avg_time_50 > 0
