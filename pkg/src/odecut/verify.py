"""Self-check suites behind ``odecut verify``.  Each suite returns a list of
checks; a check passes when its measured value meets its tolerance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import torch
import torch.nn.functional as F

from . import oracles
from .diffcore import gradcheck, l2_normalize
from .losses import (
    cgan_loss,
    hdce_loss,
    hdce_patches,
    jsd,
    src_loss,
    style_patchnce,
)
from .models import Bottleneck, Generator, GeneratorConfig, generator_param_count
from .odeint import Method, OdeProblem, SolverConfig, dopri5_integrate, integrate_fixed, odeint

ODE_PARAMS = 5_477_379
RESNET9_PARAMS = 11_378_179
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-8


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# --------------------------------------------------------------------------
# params


def suite_params() -> List[Check]:
    ode = generator_param_count(GeneratorConfig())
    base = generator_param_count(GeneratorConfig(bottleneck_kind=Bottleneck.RESNET, resnet_blocks=9))
    ratio = ode / base
    return [
        Check("ode-bottleneck generator params", ode == ODE_PARAMS, f"{ode:,} ({ode / 1e6:.3f}M)"),
        Check("resnet-9 generator params", base == RESNET9_PARAMS, f"{base:,} ({base / 1e6:.3f}M)"),
        Check("parameter ratio", abs(ratio - 0.4814) <= 1e-4, f"{ratio:.6f}"),
    ]


# --------------------------------------------------------------------------
# odeorder


def decay_problem(t1: float = 1.0) -> OdeProblem:
    return OdeProblem(lambda t, h: -h, 0.0, t1, torch.ones((), dtype=torch.float64))


def convergence_order(method: Method, dt: float = 0.1) -> float:
    exact = math.exp(-1.0)
    errs = []
    for step in (dt, dt / 2):
        sol = integrate_fixed(decay_problem(), SolverConfig(method=method, fixed_step=step))
        errs.append(abs(float(sol.h1) - exact))
    return math.log2(errs[0] / errs[1])


def suite_odeorder() -> List[Check]:
    e = convergence_order(Method.EULER, 0.01)
    r = convergence_order(Method.RK4, 0.1)
    sol = dopri5_integrate(decay_problem(), SolverConfig(method=Method.DOPRI5, rtol=1e-6, atol=1e-9))
    err = abs(float(sol.h1) - math.exp(-1.0))
    return [
        Check("euler order", abs(e - 1.0) <= 0.2, f"{e:.4f}"),
        Check("rk4 order", abs(r - 4.0) <= 0.3, f"{r:.4f}"),
        Check("dopri5 rtol=1e-6 vs exp(-1)", err <= 1e-5, f"|err|={err:.3e} in {sol.steps_taken} steps"),
    ]


# --------------------------------------------------------------------------
# gradcheck


def _rand(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def op_cases() -> Dict[str, Callable[[], tuple]]:
    """name -> factory returning (scalar fn, tensors to check)."""

    def weighted(out, seed=99):
        w = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        return (out * w).sum()

    def conv_zero():
        x, w, b = _rand(2, 3, 5, 5, seed=1), _rand(4, 3, 3, 3, seed=2), _rand(4, seed=3)
        return (lambda: weighted(F.conv2d(x, w, b, stride=2, padding=1))), [x, w, b]

    def conv_reflect():
        x, w = _rand(1, 2, 6, 6, seed=4), _rand(3, 2, 3, 3, seed=5)
        return (lambda: weighted(F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), w))), [x, w]

    def conv_transpose():
        x, w, b = _rand(1, 3, 3, 3, seed=6), _rand(3, 2, 3, 3, seed=7), _rand(2, seed=8)
        return (lambda: weighted(F.conv_transpose2d(x, w, b, stride=2, padding=1, output_padding=1))), [x, w, b]

    def instance_norm():
        x, g_, b = _rand(2, 3, 4, 4, seed=9), _rand(3, seed=10), _rand(3, seed=11)
        return (lambda: weighted(F.instance_norm(x, weight=g_, bias=b, eps=1e-5))), [x, g_, b]

    def batch_norm():
        x = _rand(4, 3, 3, 3, seed=12)
        return (lambda: weighted(F.batch_norm(x, None, None, training=True, eps=1e-5))), [x]

    def act(fn, seed):
        def make():
            x = _rand(3, 7, seed=seed)
            return (lambda: weighted(fn(x))), [x]
        return make

    def matmul():
        a, b = _rand(3, 4, seed=13), _rand(4, 2, seed=14)
        return (lambda: weighted(a @ b)), [a, b]

    def elementwise():
        a, b = _rand(5, seed=15), _rand(5, seed=16)
        return (lambda: weighted(a * b + a / (b * b + 1.0) - 2.0 * a)), [a, b]

    def exp_log():
        a = _rand(6, seed=17)
        return (lambda: weighted(torch.log(torch.exp(0.5 * a) + 1.0))), [a]

    def reductions():
        a = _rand(4, 5, seed=18)
        return (lambda: a.sum() * 0.3 + weighted(a.mean(dim=1)) + weighted(a.max(dim=0).values)), [a]

    def concat_slice():
        a, b = _rand(2, 3, seed=19), _rand(2, 2, seed=20)
        idx = torch.tensor([4, 0, 2])
        return (lambda: weighted(torch.cat([a, b], 1)[:, 1:4]) + weighted(torch.cat([a, b], 1)[:, idx], 7)), [a, b]

    def normalize():
        a = _rand(5, 4, seed=21)
        return (lambda: weighted(l2_normalize(a, dim=-1))), [a]

    return {
        "conv2d (zero pad, stride 2, bias)": conv_zero,
        "conv2d (reflection pad)": conv_reflect,
        "conv_transpose2d": conv_transpose,
        "instance_norm (affine)": instance_norm,
        "batch_norm": batch_norm,
        "relu": act(F.relu, 22),
        "leaky_relu": act(lambda x: F.leaky_relu(x, 0.2), 23),
        "tanh": act(torch.tanh, 24),
        "sigmoid": act(torch.sigmoid, 25),
        "softmax": act(lambda x: torch.softmax(x, -1), 26),
        "log_softmax": act(lambda x: torch.log_softmax(x, -1), 27),
        "matmul": matmul,
        "elementwise arithmetic": elementwise,
        "exp/log": exp_log,
        "sum/mean/max": reductions,
        "concat/slice/gather": concat_slice,
        "l2_normalize": normalize,
    }


def solver_cases() -> Dict[str, Callable[[], tuple]]:
    def make(cfg: SolverConfig):
        def factory():
            h0 = _rand(3, seed=30)
            a = _rand(3, 3, seed=31, scale=0.5)

            def fn():
                problem = OdeProblem(lambda t, h: torch.tanh(a @ h) - 0.3 * h, 0.0, 1.0, h0)
                return (odeint(problem, cfg).h1 ** 2).sum()
            return fn, [h0, a]
        return factory

    return {
        "euler unrolled": make(SolverConfig(method=Method.EULER, fixed_step=0.05)),
        "rk4 unrolled": make(SolverConfig(method=Method.RK4, fixed_step=0.1)),
        "dopri5 unrolled": make(SolverConfig(method=Method.DOPRI5, rtol=1e-10, atol=1e-12)),
    }


def generator_case(method: Method, seed: int = 0):
    """Tiny-width generator at 8x8 in float64."""
    solver = SolverConfig(method=method, fixed_step=0.25, rtol=1e-6, atol=1e-8)
    torch.manual_seed(seed)
    g = Generator(GeneratorConfig(base_channels=2, solver=solver)).double()
    with torch.no_grad():
        for p in g.parameters():
            # larger than the 0.02 init so every layer contributes visibly
            p.copy_(torch.randn(p.shape, dtype=torch.float64) * 0.3)
    x = _rand(1, 3, 8, 8, seed=seed + 40, scale=0.5)
    target = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(seed + 41), dtype=torch.float64)
    fn = lambda: ((g(x) - target) ** 2).sum()
    if method is Method.DOPRI5:
        # the tape differentiates the accepted step sequence; hold it fixed
        with torch.no_grad():
            g(x)
        g.freeze_steps()
    params = [g.stem[1].weight, g.down[1][0].weight, g.bottleneck[0].dynamics.net[1].weight,
              g.bottleneck[3].dynamics.net[5].weight, g.head[1].bias, g.up[0][0].weight, g.head[1].weight]
    return fn, [x] + params


def suite_gradcheck(include_generator: bool = True) -> List[Check]:
    checks = []
    for name, factory in {**op_cases(), **solver_cases()}.items():
        fn, tensors = factory()
        err = gradcheck(fn, tensors, eps=1e-6)
        checks.append(Check(f"grad {name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    if include_generator:
        for method in (Method.RK4, Method.DOPRI5):
            fn, tensors = generator_case(method)
            err = gradcheck(fn, tensors, eps=1e-6, max_entries=24)
            checks.append(Check(f"grad generator 8x8 ({method.value})", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return checks


# --------------------------------------------------------------------------
# lossoracle


def _unit(*shape, seed):
    g = torch.Generator().manual_seed(seed)
    return l2_normalize(torch.randn(*shape, generator=g, dtype=torch.float64), dim=-1)


def _nested(t: torch.Tensor):
    return t.tolist()


def suite_lossoracle() -> List[Check]:
    checks = []
    tau = 0.07

    # StylePatchNCE, two taps, batch 2, 6 patches
    fake = [_unit(2, 6, 5, seed=1), _unit(2, 6, 5, seed=2)]
    pseudo = [_unit(2, 6, 5, seed=3), _unit(2, 6, 5, seed=4)]
    got = float(style_patchnce(fake, pseudo, tau))
    want = oracles.style_patchnce([_nested(f) for f in fake], [_nested(p) for p in pseudo], tau)
    checks.append(Check("style_patchnce vs oracle", abs(got - want) <= ORACLE_TOL, f"|diff|={abs(got - want):.2e}"))

    k = 7
    same = torch.ones(1, k + 1, 3, dtype=torch.float64) / math.sqrt(3)
    v = float(style_patchnce([same], [same], 1.0)) / (k + 1)
    checks.append(Check("style_patchnce equal similarities = ln(K+1)", abs(v - math.log(k + 1)) <= 1e-12,
                        f"{v:.12f} vs {math.log(k + 1):.12f}"))

    # hDCE
    q, p = _unit(5, 4, seed=5), _unit(5, 4, seed=6)
    negs = _unit(5, 3, 4, seed=7)
    for hardness in (0.0, 0.5, 2.0):
        got = float(hdce_loss(q, p, negs, tau, hardness))
        want = oracles.hdce(_nested(q), _nested(p), _nested(negs), tau, hardness)
        checks.append(Check(f"hdce (hardness {hardness}) vs oracle", abs(got - want) <= ORACLE_TOL,
                            f"|diff|={abs(got - want):.2e}"))
    plain = float(torch.mean(-torch.log_softmax(
        torch.cat([(q * p).sum(-1, keepdim=True), torch.einsum("md,mnd->mn", p, negs)], 1) / tau, dim=1)[:, 0]))
    h0 = float(hdce_loss(q, p, negs, tau, 0.0))
    checks.append(Check("hdce hardness 0 = InfoNCE", abs(h0 - plain) < 1e-10, f"|diff|={abs(h0 - plain):.2e}"))
    z = _unit(2, 6, 4, seed=8)
    w = _unit(2, 6, 4, seed=9)
    got = float(hdce_patches([z], [w], tau, 1.0))
    m_q, m_p, m_n = [], [], []
    for b in range(2):
        for i in range(6):
            m_q.append(z[b, i].tolist())
            m_p.append(w[b, i].tolist())
            m_n.append([z[b, j].tolist() for j in range(6) if j != i])
    want = oracles.hdce(m_q, m_p, m_n, tau, 1.0)
    checks.append(Check("hdce over patches vs oracle", abs(got - want) <= ORACLE_TOL, f"|diff|={abs(got - want):.2e}"))

    # SRC
    fx = [_unit(2, 5, 4, seed=10), _unit(2, 4, 6, seed=11)]
    fg = [_unit(2, 5, 4, seed=12), _unit(2, 4, 6, seed=13)]
    got = float(src_loss(fx, fg, 0.5))
    want = oracles.src([_nested(a) for a in fx], [_nested(b) for b in fg], 0.5)
    checks.append(Check("src vs oracle", abs(got - want) <= ORACLE_TOL, f"|diff|={abs(got - want):.2e}"))
    point = float(jsd(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64)))
    checks.append(Check("jsd of disjoint point masses = ln 2", abs(point - math.log(2)) <= 1e-12, f"{point:.12f}"))
    checks.append(Check("src within [0, ln 2]", 0.0 <= got <= math.log(2), f"{got:.6f}"))

    # cGAN against direct summation over the logit maps
    torch.manual_seed(0)
    d = torch.nn.Conv2d(6, 1, 3).double()
    x_p, y_p, g_out = (_rand(2, 3, 5, 5, seed=s).detach() for s in (14, 15, 16))
    real = d(torch.cat([y_p, x_p], 1)).flatten().tolist()
    fake = d(torch.cat([g_out, x_p], 1)).flatten().tolist()
    for mode in ("lsgan", "vanilla"):
        g_t, d_t = cgan_loss(d, x_p, y_p, g_out, mode)
        og, od = oracles.gan_terms(real, fake, mode)
        diff = max(abs(g_t.item() - og), abs(d_t.item() - od))
        checks.append(Check(f"cgan ({mode}) vs oracle", diff <= ORACLE_TOL, f"|diff|={diff:.2e}"))
    zero_d = torch.nn.Conv2d(6, 1, 1).double()
    torch.nn.init.zeros_(zero_d.weight)
    torch.nn.init.zeros_(zero_d.bias)
    _, d_half = cgan_loss(zero_d, x_p, y_p, g_out, "vanilla")
    checks.append(Check("cgan vanilla with D=0.5 = 2 ln 2", abs(d_half.item() - 2 * math.log(2)) <= 1e-12,
                        f"{d_half.item():.12f}"))
    return checks


SUITES = {
    "params": suite_params,
    "odeorder": suite_odeorder,
    "gradcheck": suite_gradcheck,
    "lossoracle": suite_lossoracle,
}
