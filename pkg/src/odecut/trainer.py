"""Semi-supervised training loop: discriminator updates on detached fakes, then
one generator + projection-head update on the combined objective."""
from __future__ import annotations

import csv
import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import checkpoint as ckpt_io
from .data import Batch, Batcher, DatasetLayout, SizeError, load_image, save_image, scan_and_pair
from .diffcore import Adam, param_tree
from .losses import (
    REPORT_KEYS,
    FeatureExtractor,
    LossReport,
    LossWeights,
    combine,
    gan_d_term,
    gan_g_term,
    hdce_patches,
    lambda_sup,
    make_report,
    perceptual_loss,
    src_loss,
    style_patchnce,
)
from .models import Generator, GeneratorConfig, PatchDiscriminator, ProjectionHead, sample_patches
from .odeint import SolverConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "epoch", "lambda_sup") + REPORT_KEYS
COMPOSITION_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss {component}={value}")
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    # None means one pass over the pseudo pairs per epoch
    steps_per_epoch: Optional[int] = 50
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0
    image_size: int = 64
    crop: bool = True
    flip: bool = True
    workers: int = 0
    disc_channels: int = 64
    embed_dim: int = 256
    extractor_seed: int = 1234
    use_perc: bool = True
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs > self.weights.total_epochs:
            raise ValueError(f"epochs={self.epochs} exceeds loss.total_epochs={self.weights.total_epochs}")
        if self.image_size % 2 ** self.generator.n_downsample:
            raise ValueError(f"image_size {self.image_size} not divisible by {2 ** self.generator.n_downsample}")

    def to_dict(self) -> dict:
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, tuple):
                return [plain(o) for o in obj]
            if hasattr(obj, "value"):
                return obj.value
            return obj
        return plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        gen = dict(d.pop("generator"))
        gen["solver"] = SolverConfig(**gen["solver"])
        return cls(generator=GeneratorConfig(**gen), weights=LossWeights(**d.pop("weights")), **d)


@dataclass
class Models:
    G: Generator
    F: ProjectionHead
    D_P: PatchDiscriminator
    D_U: PatchDiscriminator
    extractor: FeatureExtractor

    @classmethod
    def build(cls, cfg: TrainConfig) -> "Models":
        torch.manual_seed(cfg.seed)
        g = Generator(cfg.generator)
        taps = cfg.generator.taps
        chans = cfg.generator.tap_channels()
        head = ProjectionHead([chans[t] for t in taps], cfg.embed_dim)
        d_p = PatchDiscriminator(6, cfg.disc_channels, norm=cfg.generator.norm)
        d_u = PatchDiscriminator(3, cfg.disc_channels, norm=cfg.generator.norm)
        return cls(g, head, d_p, d_u, FeatureExtractor(seed=cfg.extractor_seed))

    def trees(self) -> Dict[str, "OrderedDict[str, torch.Tensor]"]:
        return {
            "G": param_tree(self.G), "F": param_tree(self.F),
            "D_P": param_tree(self.D_P), "D_U": param_tree(self.D_U),
        }


@dataclass
class TrainState:
    epoch: int = 1
    step_in_epoch: int = 0
    global_step: int = 0
    opt: Dict[str, Adam] = field(default_factory=dict)


def make_state(models: Models, cfg: TrainConfig) -> TrainState:
    betas = (cfg.beta1, cfg.beta2)
    trees = models.trees()
    opt = {
        "G": Adam(trees["G"], cfg.lr, betas),
        "F": Adam(trees["F"], cfg.lr, betas),
        "D_P": Adam(trees["D_P"], cfg.lr, betas),
        "D_U": Adam(trees["D_U"], cfg.lr, betas),
    }
    return TrainState(opt=opt)


def _step_rng(seed: int, global_step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + global_step)


def _require_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_finite(name: str, value: torch.Tensor) -> None:
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if v != v or v in (float("inf"), float("-inf")):
        raise NonFiniteLossError(name, v)


def generator_terms(batch: Batch, models: Models, cfg: TrainConfig, fake_p: torch.Tensor,
                    fake: torch.Tensor, rng: torch.Generator) -> Dict[str, torch.Tensor]:
    """Generator-side component losses of both branches."""
    w = cfg.weights
    G, F = models.G, models.F
    terms = {}
    terms["cgan_g"] = gan_g_term(models.D_P, torch.cat([fake_p, batch.x_p], 1), w.gan_mode)

    emb_fake, idx = sample_patches(F, G.encoder_features(fake_p), w.n_patches, rng)
    emb_pseudo, idx_pseudo = sample_patches(F, G.encoder_features(batch.y_p), w.n_patches, indices=idx)
    terms["style_patchnce"] = style_patchnce(emb_fake, emb_pseudo, w.tau, idx, idx_pseudo)
    if cfg.use_perc:
        terms["perc"] = perceptual_loss(fake_p, batch.y_p, models.extractor)
    else:
        terms["perc"] = torch.zeros(())

    terms["gan_u_g"] = gan_g_term(models.D_U, fake, w.gan_mode)
    emb_gx, idx_u = sample_patches(F, G.encoder_features(fake), w.n_patches, rng)
    emb_x, _ = sample_patches(F, G.encoder_features(batch.x), w.n_patches, indices=idx_u)
    emb_y, _ = sample_patches(F, G.encoder_features(batch.y), w.n_patches, indices=idx_u)
    terms["src"] = src_loss(emb_x, emb_gx, w.tau)
    terms["hdce"] = hdce_patches(emb_gx, emb_y, w.tau, w.hardness)
    return terms


def total_losses(batch: Batch, models: Models, cfg: TrainConfig, t: int,
                 rng: Optional[torch.Generator] = None) -> LossReport:
    """Evaluate every loss term for ``batch`` at epoch ``t`` without updating anything."""
    rng = rng if rng is not None else _step_rng(cfg.seed, 0)
    lam = lambda_sup(t, cfg.weights.total_epochs, cfg.weights.schedule, cfg.weights.warmup_epochs)
    with torch.no_grad():
        fake_p, fake = models.G(batch.x_p), models.G(batch.x)
        mode = cfg.weights.gan_mode
        d_terms = {
            "cgan_d": gan_d_term(models.D_P, torch.cat([batch.y_p, batch.x_p], 1), torch.cat([fake_p, batch.x_p], 1), mode),
            "gan_u_d": gan_d_term(models.D_U, batch.y, fake, mode),
        }
        terms = generator_terms(batch, models, cfg, fake_p, fake, rng)
        terms, _ = combine(terms, cfg.weights, lam, cfg.use_perc)
    terms.update(d_terms)
    return make_report(terms, lam)


def train_step(state: TrainState, batch: Batch, models: Models, cfg: TrainConfig,
               sup_mask: bool = False) -> LossReport:
    """One D_P, one D_U and one G+F update.  ``sup_mask`` drops the
    supervised branch from the generator objective (diagnostic use)."""
    w = cfg.weights
    lam = lambda_sup(state.epoch, w.total_epochs, w.schedule, w.warmup_epochs)
    rng = _step_rng(cfg.seed, state.global_step)
    G = models.G

    _require_grad(G, True)
    _require_grad(models.F, True)
    fake_p = G(batch.x_p)
    fake = G(batch.x)

    # (1) conditional discriminator on detached G(x_p)
    _require_grad(models.D_P, True)
    state.opt["D_P"].zero_grad()
    d_p = gan_d_term(models.D_P, torch.cat([batch.y_p, batch.x_p], 1), torch.cat([fake_p, batch.x_p], 1), w.gan_mode)
    _check_finite("cgan_d", d_p)
    d_p.backward()
    state.opt["D_P"].step()

    # (2) unconditional discriminator on detached G(x)
    _require_grad(models.D_U, True)
    state.opt["D_U"].zero_grad()
    d_u = gan_d_term(models.D_U, batch.y, fake, w.gan_mode)
    _check_finite("gan_u_d", d_u)
    d_u.backward()
    state.opt["D_U"].step()

    # (3) generator and projection head; discriminators frozen
    _require_grad(models.D_P, False)
    _require_grad(models.D_U, False)
    state.opt["G"].zero_grad()
    state.opt["F"].zero_grad()
    terms = generator_terms(batch, models, cfg, fake_p, fake, rng)
    for name, value in terms.items():
        _check_finite(name, value)
    if sup_mask:
        lam = 0.0
    terms, total = combine(terms, w, lam, cfg.use_perc, include_sup=not sup_mask)
    _check_finite("total", total)
    total.backward()
    state.opt["G"].step()
    state.opt["F"].step()
    _require_grad(models.D_P, True)
    _require_grad(models.D_U, True)

    terms["cgan_d"], terms["gan_u_d"] = d_p, d_u
    report = make_report(terms, lam)
    if report.identity_gap() > COMPOSITION_TOL:
        raise TrainingError(f"loss composition violated by {report.identity_gap():.3g}")
    state.global_step += 1
    state.step_in_epoch += 1
    return report


# --------------------------------------------------------------------------
# checkpoints


def state_to_checkpoint(models: Models, state: TrainState, cfg: TrainConfig) -> ckpt_io.Checkpoint:
    tensors = OrderedDict()
    for name, tree in models.trees().items():
        for path, t in tree.items():
            tensors[f"{name}/{path}"] = t
        tensors.update(state.opt[name].state_tree(f"opt/{name}/"))
    meta = {"epoch": state.epoch, "step_in_epoch": state.step_in_epoch, "global_step": state.global_step}
    return ckpt_io.Checkpoint(config=cfg.to_dict(), tensors=tensors, meta=meta)


def restore(checkpoint: ckpt_io.Checkpoint):
    """Rebuild (config, models, state) from a checkpoint."""
    cfg = TrainConfig.from_dict(checkpoint.config)
    models = Models.build(cfg)
    state = make_state(models, cfg)
    with torch.no_grad():
        for name, tree in models.trees().items():
            for path, t in tree.items():
                key = f"{name}/{path}"
                if key not in checkpoint.tensors:
                    raise ckpt_io.CheckpointError(f"checkpoint lacks {key!r}")
                t.copy_(checkpoint.tensors[key])
    for name, opt in state.opt.items():
        opt.load_state_tree(checkpoint.tensors, f"opt/{name}/")
    meta = checkpoint.meta
    state.epoch, state.step_in_epoch, state.global_step = meta["epoch"], meta["step_in_epoch"], meta["global_step"]
    return cfg, models, state


def load_generator(path, solver_override: Optional[SolverConfig] = None) -> Generator:
    cp = ckpt_io.load(path)
    cfg = TrainConfig.from_dict(cp.config)
    g = Generator(cfg.generator)
    with torch.no_grad():
        for p, t in param_tree(g).items():
            t.copy_(cp.tensors[f"G/{p}"])
    if solver_override is not None:
        g.set_solver(solver_override)
    g.eval()
    return g


def latest_checkpoint(run_or_path) -> Path:
    p = Path(run_or_path)
    if p.is_file():
        return p
    ckdir = p / "ckpt" if (p / "ckpt").is_dir() else p
    latest = ckdir / "LATEST"
    if latest.is_file():
        return ckdir / latest.read_text().strip()
    found = sorted(ckdir.glob("*.ckpt"))
    if not found:
        raise FileNotFoundError(f"no checkpoint under {p}")
    return found[-1]


# --------------------------------------------------------------------------
# fit / infer


def _format_row(step: int, epoch: int, report: LossReport) -> List[str]:
    return [str(step), str(epoch), repr(report.lambda_sup)] + [repr(v) for v in report.row()]


@dataclass
class FitResult:
    run_dir: Path
    checkpoint: Path
    reports: List[LossReport]


def fit(cfg: TrainConfig, layout: DatasetLayout, run_dir, resume: Optional[Path] = None,
        stop_after: Optional[int] = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, writing metrics.csv and checkpoints under ``run_dir``.

    ``stop_after`` ends the run after that many global steps (with a
    checkpoint), which is how interrupted runs are simulated.
    """
    run_dir = Path(run_dir)
    (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(exist_ok=True)
    manifest = scan_and_pair(layout)
    manifest.write(run_dir / "manifest.tsv")
    batches = Batcher(manifest, cfg.batch_size, cfg.image_size, cfg.seed, cfg.crop, cfg.flip, cfg.workers)
    steps = cfg.steps_per_epoch if cfg.steps_per_epoch is not None else batches.steps_per_epoch

    metrics_path = run_dir / "metrics.csv"
    if resume is not None:
        cfg_saved, models, state = restore(ckpt_io.load(resume))
        if cfg_saved != cfg:
            raise TrainingError("resume checkpoint was written with a different configuration")
        rows = list(csv.reader(metrics_path.open())) if metrics_path.exists() else [list(METRICS_HEADER)]
        rows = rows[: 1 + state.global_step]
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        if state.step_in_epoch >= steps:
            state.epoch += 1
            state.step_in_epoch = 0
    else:
        models = Models.build(cfg)
        state = make_state(models, cfg)
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    reports: List[LossReport] = []
    last_ckpt = resume

    def save_checkpoint() -> Path:
        name = f"step_{state.global_step:07d}.ckpt"
        path = ckpt_io.save(run_dir / "ckpt" / name, state_to_checkpoint(models, state, cfg))
        tmp = run_dir / "ckpt" / "LATEST.tmp"
        tmp.write_text(name + "\n")
        tmp.replace(run_dir / "ckpt" / "LATEST")
        return path

    with metrics_path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while state.epoch <= cfg.epochs:
            for batch in batches.epoch(state.epoch, steps, start=state.step_in_epoch):
                report = train_step(state, batch, models, cfg)
                reports.append(report)
                writer.writerow(_format_row(state.global_step, state.epoch, report))
                fh.flush()
                if cfg.checkpoint_every and state.global_step % cfg.checkpoint_every == 0:
                    last_ckpt = save_checkpoint()
                if stop_after is not None and state.global_step >= stop_after:
                    return FitResult(run_dir, save_checkpoint(), reports)
            log.info("epoch %d done at step %d", state.epoch, state.global_step)
            with torch.no_grad():
                sample = models.G(batch.x_p[:1])[0]
            save_image(sample, run_dir / "samples" / f"epoch_{state.epoch:03d}.png")
            if last_ckpt is None or Path(last_ckpt).name != f"step_{state.global_step:07d}.ckpt":
                last_ckpt = save_checkpoint()
            if state.epoch == cfg.epochs:
                break
            state.epoch += 1
            state.step_in_epoch = 0
    return FitResult(run_dir, Path(last_ckpt), reports)


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def infer(checkpoint_path, inputs: Sequence[Path], out_dir, solver_override: Optional[SolverConfig] = None) -> List[Path]:
    """Translate each input PNG and write it under ``out_dir`` with the same filename."""
    g = load_generator(checkpoint_path, solver_override)
    k = 2 ** g.cfg.n_downsample
    out_dir = Path(out_dir)
    written = []
    for path in inputs:
        img = load_image(path)
        if img.shape[1] % k or img.shape[2] % k:
            raise SizeError(f"{path}: size {img.shape[1]}x{img.shape[2]} not divisible by {k}")
        with torch.no_grad():
            out = g(img[None])[0]
        dest = out_dir / Path(path).name
        save_image(out, dest)
        written.append(dest)
    return written


def translate(g: Generator, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return g(images)
