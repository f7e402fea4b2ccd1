"""Generator with a Neural-ODE bottleneck, patch discriminators and the patch
projection head used by the contrastive losses."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .diffcore import (
    check_channels,
    count_params,
    init_weights,
    l2_normalize,
    norm_layer,
    param_tree,
)
from .odeint import Method, OdeProblem, OdeSolution, SolverConfig, dopri5_replay, odeint


class ConfigError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class Bottleneck(str, enum.Enum):
    NEURAL_ODE = "ode"
    RESNET = "resnet"


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    n_downsample: int = 2
    ode_blocks: int = 4
    convs_per_dynamics: int = 2
    solver: SolverConfig = field(default_factory=SolverConfig)
    time_span: Tuple[float, float] = (0.0, 1.0)
    bottleneck_kind: Bottleneck = Bottleneck.NEURAL_ODE
    resnet_blocks: int = 9
    norm: str = "instance"
    norm_affine: bool = False
    time_input: bool = False
    in_channels: int = 3
    out_channels: int = 3
    taps: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "bottleneck_kind", Bottleneck(self.bottleneck_kind))
        object.__setattr__(self, "time_span", tuple(float(t) for t in self.time_span))
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        if self.ode_blocks < 1 or self.resnet_blocks < 1:
            raise ConfigError("bottleneck needs at least one block")
        if self.base_channels < 1 or self.convs_per_dynamics < 1:
            raise ConfigError("base_channels and convs_per_dynamics must be >= 1")
        if not self.time_span[1] > self.time_span[0]:
            raise ConfigError(f"time_span must be increasing, got {self.time_span}")

    @property
    def state_channels(self) -> int:
        return self.base_channels * 2 ** self.n_downsample

    @property
    def n_blocks(self) -> int:
        if self.bottleneck_kind is Bottleneck.NEURAL_ODE:
            return self.ode_blocks
        return self.resnet_blocks

    def tap_channels(self) -> List[int]:
        """Channel count at every tap position, tap 0 being the raw image."""
        chans = [self.in_channels, self.base_channels]
        chans += [self.base_channels * 2 ** (i + 1) for i in range(self.n_downsample)]
        chans += [self.state_channels] * self.n_blocks
        return chans


def _conv_block(cfg: GeneratorConfig, channels: int, n_convs: int, extra_in: int = 0) -> nn.Sequential:
    layers: List[nn.Module] = []
    for i in range(n_convs):
        cin = channels + (extra_in if i == 0 else 0)
        layers += [nn.ReflectionPad2d(1), nn.Conv2d(cin, channels, 3), norm_layer(cfg.norm, channels, cfg.norm_affine)]
        if i < n_convs - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class OdeDynamics(nn.Module):
    """f(t, h): conv-norm-relu-conv-norm at constant channel count."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.time_input = cfg.time_input
        self.net = _conv_block(cfg, cfg.state_channels, cfg.convs_per_dynamics, extra_in=int(cfg.time_input))

    def forward(self, t: float, h: torch.Tensor) -> torch.Tensor:
        if self.time_input:
            tt = torch.full_like(h[:, :1], t)
            h = torch.cat([h, tt], dim=1)
        return self.net(h)


class OdeBlock(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.dynamics = OdeDynamics(cfg)
        self.solver = cfg.solver
        self.t0, self.t1 = cfg.time_span
        self.last_solution: Optional[OdeSolution] = None
        # fixed Dopri5 step sequence to replay instead of solving adaptively
        self.replay_steps: Optional[List[float]] = None

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        problem = OdeProblem(self.dynamics, self.t0, self.t1, h)
        if self.replay_steps is not None:
            sol = dopri5_replay(problem, self.replay_steps)
        else:
            sol = odeint(problem, self.solver)
        self.last_solution = sol
        return sol.h1


class ResnetBlock(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.body = _conv_block(cfg, cfg.state_channels, 2)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.body(h)


class Generator(nn.Module):
    """Encoder, bottleneck and decoder; images NCHW in [-1, 1]."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(cfg.in_channels, c, 7), norm_layer(cfg.norm, c, cfg.norm_affine), nn.ReLU()
        )
        self.down = nn.ModuleList()
        for i in range(cfg.n_downsample):
            cin, cout = c * 2 ** i, c * 2 ** (i + 1)
            self.down.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1), norm_layer(cfg.norm, cout, cfg.norm_affine), nn.ReLU()
            ))
        if cfg.bottleneck_kind is Bottleneck.NEURAL_ODE:
            self.bottleneck = nn.ModuleList(OdeBlock(cfg) for _ in range(cfg.ode_blocks))
        else:
            self.bottleneck = nn.ModuleList(ResnetBlock(cfg) for _ in range(cfg.resnet_blocks))
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.n_downsample)):
            cin, cout = c * 2 ** (i + 1), c * 2 ** i
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
                norm_layer(cfg.norm, cout, cfg.norm_affine),
                nn.ReLU(),
            ))
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, cfg.out_channels, 7), nn.Tanh())
        init_weights(self)

    # ParamTree views of the three generator components.
    def enc_tree(self):
        tree = param_tree(self.stem, "stem.")
        tree.update(param_tree(self.down, "down."))
        return tree

    def dynamics_trees(self):
        return [param_tree(b, f"bottleneck.{i}.") for i, b in enumerate(self.bottleneck)]

    def dec_tree(self):
        tree = param_tree(self.up, "up.")
        tree.update(param_tree(self.head, "head."))
        return tree

    def set_solver(self, solver: SolverConfig) -> None:
        for block in self.bottleneck:
            if isinstance(block, OdeBlock):
                block.solver = solver

    def freeze_steps(self, frozen: bool = True) -> None:
        """Replay each ODE block's last accepted Dopri5 steps (or stop replaying)."""
        for block in self.bottleneck:
            if isinstance(block, OdeBlock):
                if frozen and (block.last_solution is None or block.solver.method is not Method.DOPRI5):
                    raise ValueError("freeze_steps needs a prior Dopri5 forward pass")
                block.replay_steps = list(block.last_solution.step_sizes) if frozen else None

    def _check_input(self, x: torch.Tensor) -> None:
        check_channels("generator", x, self.cfg.in_channels)
        k = 2 ** self.cfg.n_downsample
        if x.shape[2] % k or x.shape[3] % k:
            raise ConfigError(f"spatial size {tuple(x.shape[2:])} not divisible by {k}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for layer in self.down:
            h = layer(h)
        return h

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.up:
            h = layer(h)
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        h = self.encode(x)
        for block in self.bottleneck:
            h = block(h)
        return self.decode(h)

    @property
    def n_taps_available(self) -> int:
        return 2 + self.cfg.n_downsample + len(self.bottleneck)

    def encoder_features(self, x: torch.Tensor, taps: Optional[Sequence[int]] = None) -> List[torch.Tensor]:
        """Activations at the requested tap positions, in the order given.

        Tap 0 is the input, tap 1 the stem output, then one tap per
        downsampling stage and one per bottleneck block.  Only layers up to the
        deepest requested tap are evaluated.
        """
        taps = self.cfg.taps if taps is None else tuple(taps)
        if not taps:
            raise ConfigError("at least one tap is required")
        for t in taps:
            if not 0 <= t < self.n_taps_available:
                raise ConfigError(f"tap {t} outside [0, {self.n_taps_available - 1}]")
        self._check_input(x)
        layers = [self.stem, *self.down, *self.bottleneck]
        acts = {0: x}
        h = x
        for i, layer in enumerate(layers[: max(taps)], start=1):
            h = layer(h)
            acts[i] = h
        return [acts[t] for t in taps]


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting a spatial map of real/fake logits."""

    def __init__(self, in_channels: int = 3, base_channels: int = 64, n_layers: int = 3, norm: str = "instance"):
        super().__init__()
        self.in_channels = in_channels
        c = base_channels
        layers: List[nn.Module] = [nn.Conv2d(in_channels, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(c * prev, c * mult, 4, stride=2, padding=1),
                norm_layer(norm, c * mult),
                nn.LeakyReLU(0.2),
            ]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [
            nn.Conv2d(c * prev, c * mult, 4, stride=1, padding=1),
            norm_layer(norm, c * mult),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c * mult, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_channels("discriminator", x, self.in_channels)
        return self.net(x)


class ProjectionHead(nn.Module):
    """Per-tap two-layer MLP mapping sampled patch features to unit-norm embeddings."""

    def __init__(self, tap_channels: Sequence[int], embed_dim: int = 256):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, embed_dim), nn.ReLU(), nn.Linear(embed_dim, embed_dim)) for c in tap_channels
        )
        init_weights(self)

    def forward(self, tap: int, patches: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.mlps[tap](patches), dim=-1)


def sample_patches(
    head: ProjectionHead,
    features: Sequence[torch.Tensor],
    n_patches: int,
    rng: Optional[torch.Generator] = None,
    indices: Optional[Sequence[torch.Tensor]] = None,
) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """Embed ``n_patches`` locations per feature map.

    Returns ``(embeddings, indices)`` with embeddings shaped (B, n, D).  Pass
    the returned indices back in to embed the same locations of another
    image's features.
    """
    if indices is not None and len(indices) != len(features):
        raise SamplingError(f"{len(indices)} index sets for {len(features)} feature maps")
    embeddings, used = [], []
    for tap, feat in enumerate(features):
        b, c, h, w = feat.shape
        flat = feat.flatten(2).transpose(1, 2)  # (B, HW, C)
        if indices is None:
            if n_patches > h * w:
                raise SamplingError(f"cannot sample {n_patches} patches from {h}x{w} positions at tap {tap}")
            idx = torch.randperm(h * w, generator=rng)[:n_patches]
        else:
            idx = indices[tap]
            if int(idx.max()) >= h * w:
                raise SamplingError(f"index {int(idx.max())} out of range for {h}x{w} map at tap {tap}")
        embeddings.append(head(tap, flat[:, idx, :]))
        used.append(idx)
    return embeddings, used


def discriminator_forward(d: PatchDiscriminator, x: torch.Tensor) -> torch.Tensor:
    return d(x)


def generator_param_count(cfg: GeneratorConfig = GeneratorConfig()) -> int:
    """Parameter count of a generator built from ``cfg``, without allocating it."""
    with torch.device("meta"):
        return count_params(Generator(cfg))
