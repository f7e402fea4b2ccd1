"""Model accounting (parameters, FLOPs, timing, peak memory) and a proxy
Fréchet feature distance."""
from __future__ import annotations

import csv
import io
import math
import os
import platform
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import psutil
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import count_params
from .models import Generator, OdeBlock


# --------------------------------------------------------------------------
# FLOPs


def _conv_flops(module: nn.Module, inp: torch.Tensor, out: torch.Tensor) -> int:
    b = out.shape[0]
    k = int(np.prod(module.kernel_size))
    if isinstance(module, nn.ConvTranspose2d):
        # every input pixel scatters a (Cout x k) patch
        macs = b * inp.shape[1] * inp.shape[2] * inp.shape[3] * (module.out_channels // module.groups) * k
    else:
        macs = b * out.shape[1] * out.shape[2] * out.shape[3] * (module.in_channels // module.groups) * k
    flops = 2 * macs
    if module.bias is not None:
        flops += out.numel()
    return int(flops)


class FlopCounter:
    """Counts multiply-add FLOPs (2 per MAC, plus bias adds) of every conv
    evaluated while active.  Solver vector arithmetic and normalisation are
    not counted."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.total = 0
        self._handles = []

    def __enter__(self):
        def hook(m, args, out):
            self.total += _conv_flops(m, args[0], out)
        for m in self.module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                self._handles.append(m.register_forward_hook(hook))
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()


@dataclass
class FlopBreakdown:
    total: int
    shell: int
    dynamics_per_eval: int
    n_evals: int


def generator_flops(g: Generator, image_size: int, x: Optional[torch.Tensor] = None) -> FlopBreakdown:
    """FLOPs of one forward pass on a single ``image_size`` image.

    For a Neural-ODE bottleneck the total is shell FLOPs plus dynamics FLOPs
    times the number of dynamics evaluations the solver actually made.
    """
    if x is None:
        x = torch.zeros(1, g.cfg.in_channels, image_size, image_size)
    with torch.no_grad(), FlopCounter(g) as fc:
        g(x)
    total = fc.total
    blocks = [b for b in g.bottleneck if isinstance(b, OdeBlock)]
    if not blocks:
        return FlopBreakdown(total, total, 0, 0)
    k = 2 ** g.cfg.n_downsample
    h = torch.zeros(1, g.cfg.state_channels, image_size // k, image_size // k)
    with torch.no_grad(), FlopCounter(blocks[0].dynamics) as fd:
        blocks[0].dynamics(0.0, h)
    n_evals = sum(b.last_solution.n_evals for b in blocks)
    return FlopBreakdown(total, total - n_evals * fd.total, fd.total, n_evals)


# --------------------------------------------------------------------------
# timing / memory


def hardware_descriptor() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}; {os.cpu_count()} logical cpus; "
            f"torch {torch.__version__} ({torch.get_num_threads()} threads); python {platform.python_version()}")


class _RssSampler(threading.Thread):
    def __init__(self, interval: float = 0.002):
        super().__init__(daemon=True)
        self.proc = psutil.Process()
        self.interval = interval
        self.baseline = self.proc.memory_info().rss
        self.peak = self.baseline
        self._done = threading.Event()

    def run(self):
        while not self._done.is_set():
            self.peak = max(self.peak, self.proc.memory_info().rss)
            time.sleep(self.interval)

    def stop(self) -> int:
        self._done.set()
        self.join()
        self.peak = max(self.peak, self.proc.memory_info().rss)
        return self.peak - self.baseline


@dataclass
class BenchReport:
    avg_time_5: float
    avg_time_50: Optional[float]
    peak_memory: int
    params: int
    flops_per_image: int
    hardware: str
    image_size: int = 0
    n_runs: int = 0
    run_times: List[float] = field(default_factory=list)

    COLUMNS = ("avg_time_5", "avg_time_50", "peak_memory", "params", "flops_per_image", "image_size", "hardware")

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        w.writerow(["" if getattr(self, c) is None else getattr(self, c) for c in self.COLUMNS])
        return buf.getvalue()

    def table(self) -> str:
        rows = [
            ("Avg. Five Computation Time (s)", f"{self.avg_time_5:.4f}"),
            ("Avg. Fifty Computation Time (s)", "-" if self.avg_time_50 is None else f"{self.avg_time_50:.4f}"),
            ("Peak Memory (GB)", f"{self.peak_memory / 2 ** 30:.4f}"),
            ("Model Parameters (M)", f"{self.params / 1e6:.3f}"),
            ("FLOPs per image (G)", f"{self.flops_per_image / 1e9:.3f}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value}" for name, value in rows]
        lines.append(f"{'Image size':<{width}}  {self.image_size}x{self.image_size}")
        lines.append(f"{'Hardware':<{width}}  {self.hardware}")
        return "\n".join(lines)


def bench_generator(g: Generator, image_size: int = 256, n_warm: int = 2, n_runs: int = 5,
                    seed: int = 0) -> BenchReport:
    if n_runs not in (5, 50):
        raise ValueError("n_runs must be 5 or 50")
    x = torch.rand(1, g.cfg.in_channels, image_size, image_size,
                   generator=torch.Generator().manual_seed(seed)) * 2 - 1
    g.eval()
    with torch.no_grad():
        for _ in range(n_warm):
            g(x)
        sampler = _RssSampler()
        sampler.start()
        times = []
        try:
            for _ in range(n_runs):
                t0 = time.perf_counter()
                g(x)
                times.append(time.perf_counter() - t0)
        finally:
            peak = sampler.stop()
    flops = generator_flops(g, image_size, x)
    return BenchReport(
        avg_time_5=float(np.mean(times[:5])),
        avg_time_50=float(np.mean(times)) if n_runs == 50 else None,
        peak_memory=int(peak),
        params=count_params(g),
        flops_per_image=flops.total,
        hardware=hardware_descriptor(),
        image_size=image_size,
        n_runs=n_runs,
        run_times=times,
    )


# --------------------------------------------------------------------------
# proxy Fréchet distance

FEATURE_DIM = 192
SHRINKAGE = 1e-6


class ProxyExtractor(nn.Module):
    """Seed-initialised strided conv stack, global-average-pooled to 192 features."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (48, 96, FEATURE_DIM)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.1)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return h.mean(dim=(2, 3))


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray


def extract_features(images: torch.Tensor, extractor_seed: int = 0, batch_size: int = 32) -> FeatureStats:
    if images.shape[0] == 0:
        raise ValueError("empty image set")
    if images.shape[0] < 2:
        raise ValueError("need at least two images for a covariance")
    net = ProxyExtractor(extractor_seed)
    with torch.no_grad():
        feats = torch.cat([net(images[i:i + batch_size].float()) for i in range(0, images.shape[0], batch_size)])
    return stats_from_features(feats.double().numpy())


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False)
    sigma = 0.5 * (sigma + sigma.T) + SHRINKAGE * np.eye(feats.shape[1])
    return FeatureStats(mu, sigma)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace term uses sqrt(S_a) S_b sqrt(S_a), which is symmetric and has
    the same eigenvalues as S_a S_b; negative eigenvalues are clamped at 0.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sqrt(np.clip(vals, 0, None)).sum())
    d = float(diff @ diff) + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2 * tr_sqrt
    return max(d, 0.0)
