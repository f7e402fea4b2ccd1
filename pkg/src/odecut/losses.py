"""Adversarial, contrastive and perceptual objectives plus the supervision schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .diffcore import ShapeError

GAN_MODES = ("lsgan", "vanilla")
SCHEDULES = ("cosine", "warmup_cosine")


class AlignmentError(ValueError):
    pass


class DegenerateDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    style: float = 1.0
    src: float = 0.05
    hdce: float = 1.0
    perc: float = 0.1
    tau: float = 0.07
    hardness: float = 1.0
    n_patches: int = 256
    warmup_epochs: int = 10
    total_epochs: int = 25
    gan_mode: str = "lsgan"
    schedule: str = "cosine"

    def __post_init__(self):
        for name in ("style", "src", "hdce", "perc", "hardness"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")


REPORT_KEYS = (
    "cgan_g", "cgan_d", "style_patchnce", "gan_u_g", "gan_u_d",
    "src", "hdce", "perc", "sup_total", "unsup_total", "total",
)


@dataclass
class LossReport:
    values: Dict[str, float] = field(default_factory=dict)
    lambda_sup: float = 1.0

    def __getitem__(self, key):
        return self.values[key]

    def row(self) -> List[float]:
        return [self.values[k] for k in REPORT_KEYS]

    def identity_gap(self) -> float:
        v = self.values
        return abs(v["total"] - (v["unsup_total"] + self.lambda_sup * v["sup_total"]))


# --------------------------------------------------------------------------
# adversarial terms


def gan_d_term(d: nn.Module, real: torch.Tensor, fake: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    """Discriminator objective; ``fake`` is detached."""
    if real.shape != fake.shape:
        raise ShapeError(f"gan loss: real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    real_logits = d(real)
    fake_logits = d(fake.detach())
    if mode == "lsgan":
        return ((real_logits - 1) ** 2).mean() + (fake_logits ** 2).mean()
    if mode == "vanilla":
        return (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
                + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
    raise ValueError(f"unknown gan mode {mode!r}")


def gan_g_term(d: nn.Module, fake: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    """Generator objective; depends on the fake-side logits only."""
    logits = d(fake)
    if mode == "lsgan":
        return ((logits - 1) ** 2).mean()
    if mode == "vanilla":
        return F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))
    raise ValueError(f"unknown gan mode {mode!r}")


def _gan_terms(d, real, fake, mode):
    return gan_g_term(d, fake, mode), gan_d_term(d, real, fake, mode)


def cgan_loss(d_p: nn.Module, x_p: torch.Tensor, y_p: torch.Tensor, g_out: torch.Tensor,
              mode: str = "lsgan") -> Tuple[torch.Tensor, torch.Tensor]:
    """(generator term, discriminator term) of the conditional patch GAN.

    The discriminator sees (target, source) and (G(source), source) channel
    concatenations; its term is computed on a detached fake.
    """
    if not (x_p.shape == y_p.shape == g_out.shape):
        raise ShapeError(f"cgan_loss: shapes {tuple(x_p.shape)}, {tuple(y_p.shape)}, {tuple(g_out.shape)} differ")
    return _gan_terms(d_p, torch.cat([y_p, x_p], 1), torch.cat([g_out, x_p], 1), mode)


def gan_loss_unsup(d_u: nn.Module, y: torch.Tensor, g_out: torch.Tensor,
                   mode: str = "lsgan") -> Tuple[torch.Tensor, torch.Tensor]:
    return _gan_terms(d_u, y, g_out, mode)


# --------------------------------------------------------------------------
# contrastive terms
#
# Embeddings are (B, n, D) tensors per tap, unit norm along D.


def patch_nce(query: torch.Tensor, keys: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Per-location cross-entropy with the key at the same location as the
    positive and every other key as a negative.  Returns (B, n)."""
    if query.shape != keys.shape:
        raise AlignmentError(f"query {tuple(query.shape)} vs keys {tuple(keys.shape)}")
    logits = torch.bmm(query, keys.transpose(1, 2)) / tau  # (B, n, n); diagonal holds positives
    return torch.logsumexp(logits, dim=-1) - torch.diagonal(logits, dim1=1, dim2=2)


def style_patchnce(emb_fake: Sequence[torch.Tensor], emb_pseudo: Sequence[torch.Tensor], tau: float = 1.0,
                   idx_fake: Optional[Sequence[torch.Tensor]] = None,
                   idx_pseudo: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
    """Summed over taps and locations, averaged over the batch."""
    if len(emb_fake) != len(emb_pseudo):
        raise AlignmentError(f"{len(emb_fake)} fake taps vs {len(emb_pseudo)} pseudo-target taps")
    if idx_fake is not None and idx_pseudo is not None:
        for a, b in zip(idx_fake, idx_pseudo):
            if not torch.equal(a, b):
                raise AlignmentError("fake and pseudo-target patches were sampled at different locations")
    total = 0.0
    for q, k in zip(emb_fake, emb_pseudo):
        total = total + patch_nce(q, k.detach(), tau).sum(dim=1).mean()
    return total


def _hdce_from_similarities(pos_sim: torch.Tensor, neg_sim: torch.Tensor, tau: float,
                            hardness: float) -> torch.Tensor:
    # pos_sim (M,), neg_sim (M, N); returns per-query losses (M,)
    n = neg_sim.shape[-1]
    pos_logit = pos_sim / tau
    log_w = math.log(n) + torch.log_softmax(hardness * neg_sim, dim=-1)
    denom = torch.logsumexp(torch.cat([pos_logit.unsqueeze(-1), log_w + neg_sim / tau], dim=-1), dim=-1)
    return denom - pos_logit


def hdce_loss(query: torch.Tensor, pos: torch.Tensor, negs: torch.Tensor, tau: float,
              hardness: float = 1.0) -> torch.Tensor:
    """Contrastive loss with importance-weighted negatives.

    ``query``/``pos`` are (M, D), ``negs`` (M, N, D).  Each positive ``w``
    scores the query ``z`` and the negatives ``z_i``; negatives are reweighted
    by ``N * softmax(hardness * w.z_i)`` inside the denominator, which keeps the
    positive term.  Mean over the M queries.
    """
    if negs.dim() != 3 or negs.shape[1] < 1:
        raise ValueError("hdce_loss needs at least one negative per query")
    if query.shape != pos.shape or negs.shape[0] != query.shape[0] or negs.shape[2] != query.shape[1]:
        raise ShapeError(f"hdce_loss: query {tuple(query.shape)}, pos {tuple(pos.shape)}, negs {tuple(negs.shape)}")
    pos_sim = (pos * query).sum(-1)
    neg_sim = torch.bmm(negs, pos.unsqueeze(-1)).squeeze(-1)
    return _hdce_from_similarities(pos_sim, neg_sim, tau, hardness).mean()


def hdce_patches(emb_query: Sequence[torch.Tensor], emb_pos: Sequence[torch.Tensor], tau: float,
                 hardness: float = 1.0) -> torch.Tensor:
    """hDCE summed over taps.  The negatives for location i are the query
    image's patches at every other sampled location."""
    if len(emb_query) != len(emb_pos):
        raise AlignmentError("tap count mismatch")
    total = 0.0
    for z, w in zip(emb_query, emb_pos):
        if z.shape != w.shape:
            raise AlignmentError(f"query {tuple(z.shape)} vs positives {tuple(w.shape)}")
        b, n, _ = z.shape
        if n < 2:
            raise ValueError("hdce needs at least two patches per tap")
        sim = torch.bmm(w, z.transpose(1, 2))  # sim[b, i, j] = w_i . z_j
        off = ~torch.eye(n, dtype=torch.bool)
        pos_sim = torch.diagonal(sim, dim1=1, dim2=2).reshape(-1)
        neg_sim = sim[:, off].reshape(b * n, n - 1)
        total = total + _hdce_from_similarities(pos_sim, neg_sim, tau, hardness).mean()
    return total


def _similarity_distribution(emb: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-wise softmax of within-image patch similarities, diagonal excluded.
    Returns (B, n, n-1)."""
    b, n, _ = emb.shape
    sim = torch.bmm(emb, emb.transpose(1, 2)) / tau
    off = ~torch.eye(n, dtype=torch.bool)
    return torch.softmax(sim[:, off].reshape(b, n, n - 1), dim=-1)


def jsd(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence between distributions along the last axis (natural log)."""
    m = 0.5 * (p + q)
    kl_pm = (torch.xlogy(p, p) - torch.xlogy(p, m)).sum(-1)
    kl_qm = (torch.xlogy(q, q) - torch.xlogy(q, m)).sum(-1)
    return 0.5 * (kl_pm + kl_qm)


def src_loss(feat_x: Sequence[torch.Tensor], feat_gx: Sequence[torch.Tensor], tau: float = 1.0) -> torch.Tensor:
    """Mean JSD between matching rows of the two similarity distributions, summed over taps."""
    if len(feat_x) != len(feat_gx):
        raise AlignmentError("tap count mismatch")
    total = 0.0
    for a, b in zip(feat_x, feat_gx):
        if a.shape != b.shape:
            raise AlignmentError(f"patch sets {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.shape[1] < 2:
            raise DegenerateDistributionError("src_loss needs at least two patches per tap")
        total = total + jsd(_similarity_distribution(a, tau), _similarity_distribution(b, tau)).mean()
    return total / len(feat_x)


# --------------------------------------------------------------------------
# perceptual term


class FeatureExtractor(nn.Module):
    """Frozen multi-layer conv stack.  Random seed-fixed weights unless a
    state dict is supplied."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128), seed: int = 1234, state_dict=None):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.convs = nn.ModuleList(layers)
        if state_dict is not None:
            self.load_state_dict(state_dict)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"perceptual_loss: {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = extractor(a), extractor(b)
    return sum((x - y).abs().mean() for x, y in zip(fa, fb)) / len(fa)


# --------------------------------------------------------------------------
# schedule


def lambda_sup(t: int, total_epochs: int = 25, schedule: str = "cosine", warmup_epochs: int = 10) -> float:
    """Supervision weight for 1-based epoch ``t``: cos(pi (t-1) / 40) clamped at 0.

    ``warmup_cosine`` keeps supervision off during the warm-up epochs and runs
    the same cosine from the first epoch after it.
    """
    if not 1 <= t <= total_epochs:
        raise ValueError(f"epoch {t} outside [1, {total_epochs}]")
    if schedule == "cosine":
        s = t - 1
    elif schedule == "warmup_cosine":
        if t <= warmup_epochs:
            return 0.0
        s = t - warmup_epochs - 1
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    if s >= 20:
        # cos is <= 0 from pi/2 on; floating-point cos(pi/2) is 6e-17, not 0
        return 0.0
    return math.cos(math.pi * s / 40)


def combine(components: Dict[str, torch.Tensor], weights: LossWeights, lam: float,
            use_perc: bool = True, include_sup: bool = True) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
    """Branch totals from component losses.  Returns (all terms, generator total).

    Components are promoted to float64 before they are combined.  With
    ``include_sup=False`` the supervised branch is left out of the total
    entirely (it is still reported, with ``lam`` forced to 0).
    """
    c = {k: v.double() if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
         for k, v in components.items()}
    sup = c["cgan_g"] + weights.style * c["style_patchnce"]
    if use_perc:
        sup = sup + weights.perc * c["perc"]
    unsup = c["gan_u_g"] + weights.src * c["src"] + weights.hdce * c["hdce"]
    total = unsup + lam * sup if include_sup else unsup
    c["sup_total"], c["unsup_total"], c["total"] = sup, unsup, total
    return c, total


def make_report(terms: Dict[str, torch.Tensor], lam: float) -> LossReport:
    vals = {k: float(terms[k].detach()) if torch.is_tensor(terms[k]) else float(terms[k]) for k in REPORT_KEYS}
    return LossReport(values=vals, lambda_sup=lam)
