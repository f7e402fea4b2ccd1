import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from PIL import Image

from odecut.data import (
    Batcher,
    DataError,
    DatasetLayout,
    DecodeError,
    FormatError,
    Manifest,
    PairingError,
    SizeError,
    draw_transform,
    load_image,
    make_fixtures,
    preprocess,
    preprocess_pair,
    save_image,
    scan_and_pair,
    steps_per_pass,
    stylize,
    to_tensor,
    to_uint8,
)


def test_fixture_layout(fixtures_root):
    layout = DatasetLayout.under(fixtures_root, image_size=32)
    m = scan_and_pair(layout)
    assert len(m) == 8 and len(m.unpaired_src) == 4 and len(m.unpaired_tgt) == 4
    img = load_image(m.pairs[0][1])
    assert img.shape == (3, 32, 40)
    assert float(img.min()) >= -1 and float(img.max()) <= 1


def test_fixtures_deterministic(tmp_path):
    a = make_fixtures(tmp_path / "a", n=4, seed=3, size=16)
    b = make_fixtures(tmp_path / "b", n=4, seed=3, size=16)
    for d_a, d_b in ((a.pseudo_src_dir, b.pseudo_src_dir), (a.unpaired_tgt_dir, b.unpaired_tgt_dir)):
        for pa in sorted(d_a.iterdir()):
            assert pa.read_bytes() == (d_b / pa.name).read_bytes()
    with pytest.raises(DataError):
        make_fixtures(tmp_path / "c", n=1)


def test_pairing_errors(tmp_path):
    layout = make_fixtures(tmp_path, n=4, size=16)
    (layout.pseudo_tgt_dir / "0002.png").unlink()
    with pytest.raises(PairingError) as info:
        scan_and_pair(layout)
    assert info.value.orphans == ["0002"]


def test_format_and_decode_errors(tmp_path):
    layout = make_fixtures(tmp_path, n=2, size=16)
    Image.new("RGB", (16, 16)).save(layout.unpaired_src_dir / "x.jpg")
    with pytest.raises(FormatError):
        scan_and_pair(layout)
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DecodeError):
        load_image(bad)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError):
        scan_and_pair(DatasetLayout(empty, empty, empty, empty))


def test_manifest_roundtrip(fixtures_root, tmp_path):
    m = scan_and_pair(DatasetLayout.under(fixtures_root))
    m.write(tmp_path / "m.tsv")
    back = Manifest.read(tmp_path / "m.tsv")
    assert back.pairs == m.pairs and back.unpaired_src == m.unpaired_src and back.unpaired_tgt == m.unpaired_tgt


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (4, 5, 3)))
def test_uint8_roundtrip(arr):
    assert np.array_equal(to_uint8(to_tensor(arr)), arr)


def test_save_load_roundtrip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
    save_image(to_tensor(arr), tmp_path / "a.png")
    assert np.array_equal(to_uint8(load_image(tmp_path / "a.png")), arr)


def test_stylize_is_flip_and_interior_crop_equivariant():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(12, 15, 3), dtype=np.uint8)
    s = stylize(img)
    assert np.array_equal(stylize(img[:, ::-1]), s[:, ::-1])
    crop = stylize(img[2:10, 3:12])
    assert np.array_equal(crop[1:-1, 1:-1], s[3:9, 4:11])


def test_paired_transform_is_shared():
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(32, 40, 3), dtype=np.uint8)
    x = to_tensor(arr)
    y = to_tensor(stylize(arr))
    for seed in range(10):
        xa, ya, params = preprocess_pair(x, y, 32, np.random.default_rng(seed))
        assert xa.shape == ya.shape == (3, 32, 32)
        # the pseudo target of the transformed source is the transformed target, away from the crop border
        want = to_tensor(stylize(to_uint8(xa)))
        assert torch.equal(want[:, 1:-1, 1:-1], ya[:, 1:-1, 1:-1])
    with pytest.raises(SizeError):
        preprocess_pair(x, y[:, :, :30], 32, rng)


def test_resize_short_side_and_size_errors():
    img = torch.zeros(3, 64, 80)
    out, _ = preprocess(img, 32, np.random.default_rng(0))
    assert out.shape == (3, 32, 32)
    with pytest.raises(SizeError):
        draw_transform((16, 40), 32, np.random.default_rng(0))


def test_no_crop_no_flip_is_center():
    p = draw_transform((32, 40), 32, np.random.default_rng(0), crop=False, flip=False)
    assert (p.top, p.left, p.flip) == (0, 4, False)


def test_batcher_deterministic_and_random_access(fixtures_root):
    m = scan_and_pair(DatasetLayout.under(fixtures_root))
    a = Batcher(m, 3, 32, seed=5)
    b = Batcher(m, 3, 32, seed=5, workers=2)
    assert a.steps_per_epoch == steps_per_pass(8, 3) == 3
    seq_a = list(a.epoch(2, steps=5))
    seq_b = list(b.epoch(2, steps=5))
    for s, (ba, bb) in enumerate(zip(seq_a, seq_b)):
        direct = a.batch_at(2, s)
        for t1, t2, t3 in zip((ba.x_p, ba.y_p, ba.x, ba.y), (bb.x_p, bb.y_p, bb.x, bb.y),
                              (direct.x_p, direct.y_p, direct.x, direct.y)):
            assert torch.equal(t1, t2) and torch.equal(t1, t3)
        assert ba.meta == bb.meta
    resumed = list(a.epoch(2, steps=5, start=3))
    assert torch.equal(resumed[0].x_p, seq_a[3].x_p)
    other = Batcher(m, 3, 32, seed=6).batch_at(2, 0)
    assert not torch.equal(other.x_p, seq_a[0].x_p)
    # an epoch covers every pair before repeating any
    first_pass = sum((bt.meta["pair_ids"] for bt in seq_a), [])[:8]
    assert sorted(first_pass) == sorted(p[0] for p in m.pairs)


def test_batcher_validation(fixtures_root):
    m = scan_and_pair(DatasetLayout.under(fixtures_root))
    with pytest.raises(DataError):
        Batcher(m, 0, 32)
    with pytest.raises(DataError):
        Batcher(Manifest([], [], []), 2, 32)
