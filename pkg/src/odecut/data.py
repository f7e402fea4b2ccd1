"""Pseudo-paired / unpaired folder ingestion, shared-transform preprocessing,
deterministic batching and a procedural fixture generator."""
from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png"}
_KNOWN_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class DataError(ValueError):
    pass


class PairingError(DataError):
    def __init__(self, orphans: Sequence[str]):
        super().__init__(f"pseudo sources without a matching target: {', '.join(orphans)}")
        self.orphans = list(orphans)


class FormatError(DataError):
    pass


class DecodeError(DataError):
    pass


class SizeError(DataError):
    pass


@dataclass(frozen=True)
class DatasetLayout:
    pseudo_src_dir: Path
    pseudo_tgt_dir: Path
    unpaired_src_dir: Path
    unpaired_tgt_dir: Path
    image_size: int = 64
    channels: int = 3

    @classmethod
    def under(cls, root, image_size: int = 64) -> "DatasetLayout":
        root = Path(root)
        return cls(root / "pseudo_src", root / "pseudo_tgt", root / "unpaired_src", root / "unpaired_tgt", image_size)


@dataclass
class Manifest:
    pairs: List[Tuple[str, Path, Path]]
    unpaired_src: List[Path]
    unpaired_tgt: List[Path]

    def __len__(self):
        return len(self.pairs)

    def write(self, path) -> None:
        lines = [f"{i}\t{s}\t{t}" for i, s, t in self.pairs]
        lines += [f"X:{p.stem}\t{p}\t-" for p in self.unpaired_src]
        lines += [f"Y:{p.stem}\t-\t{p}" for p in self.unpaired_tgt]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        pairs, xs, ys = [], [], []
        for line in Path(path).read_text().splitlines():
            if not line:
                continue
            ident, src, tgt = line.split("\t")
            if ident.startswith("X:"):
                xs.append(Path(src))
            elif ident.startswith("Y:"):
                ys.append(Path(tgt))
            else:
                pairs.append((ident, Path(src), Path(tgt)))
        return cls(pairs, xs, ys)


def _list_images(directory: Path) -> Dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found = {}
    for p in sorted(directory.iterdir()):
        if p.name.startswith(".") or not p.is_file():
            continue
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            kind = "image format" if p.suffix.lower() in _KNOWN_IMAGE_SUFFIXES else "file"
            raise FormatError(f"unsupported {kind}: {p} (expected 8-bit PNG)")
        found[p.stem] = p
    if not found:
        raise DataError(f"no images in {directory}")
    return found


def scan_and_pair(layout: DatasetLayout) -> Manifest:
    src = _list_images(layout.pseudo_src_dir)
    tgt = _list_images(layout.pseudo_tgt_dir)
    orphans = sorted(set(src) - set(tgt))
    if orphans:
        raise PairingError(orphans)
    pairs = [(stem, src[stem], tgt[stem]) for stem in sorted(src)]
    xs = list(_list_images(layout.unpaired_src_dir).values())
    ys = list(_list_images(layout.unpaired_tgt_dir).values())
    return Manifest(pairs, xs, ys)


# --------------------------------------------------------------------------
# image IO


def load_image(path) -> torch.Tensor:
    """(3, H, W) float32 in [-1, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return to_tensor(arr)


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """Inverse of ``to_tensor`` for a (3, H, W) tensor; rounds to nearest."""
    arr = ((t.detach().clamp(-1, 1).permute(1, 2, 0).double() + 1.0) * 127.5).round()
    return arr.numpy().astype(np.uint8)


def save_image(t: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(t), mode="RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# preprocessing


def _resize_short_side(img: torch.Tensor, size: int) -> torch.Tensor:
    _, h, w = img.shape
    if min(h, w) == size:
        return img
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    out = F.interpolate(img[None], size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)[0]
    return out.clamp(-1, 1)


@dataclass
class TransformParams:
    top: int
    left: int
    flip: bool


def draw_transform(shape: Tuple[int, int], image_size: int, rng: np.random.Generator,
                   crop: bool = True, flip: bool = True) -> TransformParams:
    h, w = shape
    if h < image_size or w < image_size:
        raise SizeError(f"image {h}x{w} smaller than crop {image_size}")
    top = int(rng.integers(0, h - image_size + 1)) if crop else (h - image_size) // 2
    left = int(rng.integers(0, w - image_size + 1)) if crop else (w - image_size) // 2
    do_flip = bool(rng.random() < 0.5) if flip else False
    return TransformParams(top, left, do_flip)


def apply_transform(img: torch.Tensor, params: TransformParams, image_size: int) -> torch.Tensor:
    out = img[:, params.top:params.top + image_size, params.left:params.left + image_size]
    if params.flip:
        out = torch.flip(out, dims=[2])
    return out.contiguous()


def preprocess(img: torch.Tensor, image_size: int, rng: np.random.Generator, crop: bool = True,
               flip: bool = True) -> Tuple[torch.Tensor, TransformParams]:
    img = _resize_short_side(img, image_size)
    params = draw_transform(tuple(img.shape[1:]), image_size, rng, crop, flip)
    return apply_transform(img, params, image_size), params


def preprocess_pair(x_p: torch.Tensor, y_p: torch.Tensor, image_size: int, rng: np.random.Generator,
                    crop: bool = True, flip: bool = True):
    """Resize both images, then apply one shared crop and flip.

    Returns ``(x_p', y_p', params)``.
    """
    if x_p.shape != y_p.shape:
        raise SizeError(f"pseudo pair sizes differ: {tuple(x_p.shape)} vs {tuple(y_p.shape)}")
    x_p = _resize_short_side(x_p, image_size)
    y_p = _resize_short_side(y_p, image_size)
    params = draw_transform(tuple(x_p.shape[1:]), image_size, rng, crop, flip)
    return apply_transform(x_p, params, image_size), apply_transform(y_p, params, image_size), params


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    x_p: torch.Tensor
    y_p: torch.Tensor
    x: torch.Tensor
    y: torch.Tensor
    meta: Dict[str, list] = field(default_factory=dict)


def steps_per_pass(n_pairs: int, batch_size: int) -> int:
    return math.ceil(n_pairs / batch_size)


class Batcher:
    """Deterministic batch stream over a manifest.

    Pair order is a chain of epoch-seeded permutations; each step's unpaired
    draws and transforms come from a generator keyed on (seed, epoch, step), so
    any step can be rebuilt without replaying the ones before it.
    """

    def __init__(self, manifest: Manifest, batch_size: int, image_size: int, seed: int = 0,
                 crop: bool = True, flip: bool = True, workers: int = 0, cache: bool = True):
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not manifest.pairs or not manifest.unpaired_src or not manifest.unpaired_tgt:
            raise DataError("empty manifest")
        self.manifest = manifest
        self.batch_size = batch_size
        self.image_size = image_size
        self.seed = seed
        self.crop, self.flip = crop, flip
        self.workers = workers
        self._cache: Optional[Dict[Path, torch.Tensor]] = {} if cache else None

    @property
    def steps_per_epoch(self) -> int:
        return steps_per_pass(len(self.manifest), self.batch_size)

    def _image(self, path: Path) -> torch.Tensor:
        if self._cache is None:
            return load_image(path)
        img = self._cache.get(path)
        if img is None:
            img = self._cache[path] = load_image(path)
        return img

    def _pair_order(self, epoch: int, n_needed: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        n = len(self.manifest)
        chunks, total = [], 0
        while total < n_needed:
            chunks.append(rng.permutation(n))
            total += n
        return np.concatenate(chunks)[:n_needed]

    def batch_at(self, epoch: int, step: int, _order: Optional[np.ndarray] = None) -> Batch:
        bs = self.batch_size
        order = self._pair_order(epoch, (step + 1) * bs) if _order is None else _order
        pair_idx = order[step * bs:(step + 1) * bs]
        rng = np.random.default_rng([self.seed, epoch, step, 1])
        x_idx = rng.integers(0, len(self.manifest.unpaired_src), size=bs)
        y_idx = rng.integers(0, len(self.manifest.unpaired_tgt), size=bs)
        xs_p, ys_p, xs, ys = [], [], [], []
        meta = {"pair_ids": [], "x_ids": [], "y_ids": [], "crops": [], "flips": []}
        for i in pair_idx:
            ident, sp, tp = self.manifest.pairs[i]
            a, b, params = preprocess_pair(self._image(sp), self._image(tp), self.image_size, rng, self.crop, self.flip)
            xs_p.append(a)
            ys_p.append(b)
            meta["pair_ids"].append(ident)
            meta["crops"].append((params.top, params.left))
            meta["flips"].append(params.flip)
        for i in x_idx:
            p = self.manifest.unpaired_src[i]
            xs.append(preprocess(self._image(p), self.image_size, rng, self.crop, self.flip)[0])
            meta["x_ids"].append(p.stem)
        for i in y_idx:
            p = self.manifest.unpaired_tgt[i]
            ys.append(preprocess(self._image(p), self.image_size, rng, self.crop, self.flip)[0])
            meta["y_ids"].append(p.stem)
        return Batch(torch.stack(xs_p), torch.stack(ys_p), torch.stack(xs), torch.stack(ys), meta)

    def epoch(self, epoch: int, steps: Optional[int] = None, start: int = 0) -> Iterator[Batch]:
        steps = self.steps_per_epoch if steps is None else steps
        order = self._pair_order(epoch, steps * self.batch_size)
        if self.workers <= 0:
            for s in range(start, steps):
                yield self.batch_at(epoch, s, order)
            return
        # bounded look-ahead; batches come back in step order regardless of worker count
        with ThreadPoolExecutor(self.workers) as pool:
            pending = deque()
            s = start
            while s < steps or pending:
                while s < steps and len(pending) < 2 * self.workers:
                    pending.append(pool.submit(self.batch_at, epoch, s, order))
                    s += 1
                yield pending.popleft().result()


def batcher(manifest: Manifest, batch_size: int, seed: int, epoch: int, image_size: int = 64,
            steps: Optional[int] = None, **kwargs) -> Iterator[Batch]:
    return Batcher(manifest, batch_size, image_size, seed, **kwargs).epoch(epoch, steps)


# --------------------------------------------------------------------------
# procedural fixtures

PALETTE = np.array([
    [28, 36, 77], [58, 110, 165], [126, 186, 228], [246, 230, 196],
    [240, 160, 110], [196, 82, 74], [88, 150, 92], [190, 220, 130],
], dtype=np.int64)
EDGE_THRESHOLD = 60_000  # on the 299/587/114 integer luminance scale


def stylize(img: np.ndarray) -> np.ndarray:
    """Palette quantisation with darkened edges on (H, W, 3) uint8.

    Pure integer arithmetic; equivariant to horizontal flips, and to crops on
    pixels at least one away from the crop border.
    """
    rgb = img.astype(np.int64)
    d = ((rgb[:, :, None, :] - PALETTE[None, None]) ** 2).sum(-1)
    out = PALETTE[np.argmin(d, axis=-1)]
    lum = rgb @ np.array([299, 587, 114], dtype=np.int64)
    pad = np.pad(lum, 1, mode="edge")
    edge = np.abs(pad[1:-1, 2:] - pad[1:-1, :-2]) + np.abs(pad[2:, 1:-1] - pad[:-2, 1:-1])
    out = np.where((edge > EDGE_THRESHOLD)[..., None], out // 2, out)
    return out.astype(np.uint8)


def procedural_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth background gradient with a few random filled shapes."""
    corners = rng.uniform(0, 255, size=(2, 2, 3))
    yy = np.linspace(0, 1, height)[:, None, None]
    xx = np.linspace(0, 1, width)[None, :, None]
    img = (corners[0, 0] * (1 - yy) * (1 - xx) + corners[0, 1] * (1 - yy) * xx
           + corners[1, 0] * yy * (1 - xx) + corners[1, 1] * yy * xx)
    Y, X = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0, 255, size=3)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if rng.random() < 0.5:
            r = rng.uniform(0.1, 0.3) * min(height, width)
            mask = (Y - cy) ** 2 + (X - cx) ** 2 <= r * r
        else:
            hh, ww = rng.uniform(0.1, 0.4) * height, rng.uniform(0.1, 0.4) * width
            mask = (np.abs(Y - cy) <= hh) & (np.abs(X - cx) <= ww)
        img[mask] = color
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def make_fixtures(out_dir, n: int = 16, seed: int = 0, size: int = 32) -> DatasetLayout:
    """Write ``n`` pseudo pairs plus ``n // 2`` unpaired sources and targets.

    Images are ``size`` high and ``size + size // 4`` wide so the random crop
    has room to move.
    """
    if n < 2:
        raise DataError("need at least two fixture pairs")
    layout = DatasetLayout.under(out_dir, image_size=size)
    for d in (layout.pseudo_src_dir, layout.pseudo_tgt_dir, layout.unpaired_src_dir, layout.unpaired_tgt_dir):
        d.mkdir(parents=True, exist_ok=True)
    h, w = size, size + size // 4
    rng = np.random.default_rng([seed, 0])
    for i in range(n):
        real = procedural_image(rng, h, w)
        Image.fromarray(real, "RGB").save(layout.pseudo_src_dir / f"{i:04d}.png")
        Image.fromarray(stylize(real), "RGB").save(layout.pseudo_tgt_dir / f"{i:04d}.png")
    rng = np.random.default_rng([seed, 1])
    for i in range(n // 2):
        Image.fromarray(procedural_image(rng, h, w), "RGB").save(layout.unpaired_src_dir / f"{i:04d}.png")
    rng = np.random.default_rng([seed, 2])
    for i in range(n // 2):
        real = procedural_image(rng, h, w)
        Image.fromarray(stylize(real), "RGB").save(layout.unpaired_tgt_dir / f"{i:04d}.png")
    return layout
