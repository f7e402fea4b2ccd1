import csv
import dataclasses

import pytest
import torch

from odecut import checkpoint as ck
from odecut.data import Batcher, DatasetLayout, SizeError, load_image, scan_and_pair
from odecut.diffcore import tree_digest
from odecut.losses import LossWeights, lambda_sup
from odecut.models import GeneratorConfig
from odecut.trainer import (
    COMPOSITION_TOL,
    METRICS_HEADER,
    Models,
    NonFiniteLossError,
    TrainConfig,
    TrainingError,
    fit,
    infer,
    latest_checkpoint,
    load_generator,
    make_state,
    read_metrics,
    restore,
    state_to_checkpoint,
    total_losses,
    train_step,
)


def tiny(**kw):
    base = dict(epochs=2, steps_per_epoch=3, batch_size=2, image_size=32, disc_channels=4, embed_dim=16,
                generator=GeneratorConfig(base_channels=4), weights=LossWeights(n_patches=8))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def layout(fixtures_root):
    return DatasetLayout.under(fixtures_root, image_size=32)


def first_batch(layout, cfg):
    return Batcher(scan_and_pair(layout), cfg.batch_size, cfg.image_size, cfg.seed).batch_at(1, 0)


def test_config_validation_and_roundtrip():
    cfg = tiny()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        tiny(epochs=26)
    with pytest.raises(ValueError):
        tiny(image_size=34)
    with pytest.raises(ValueError):
        tiny(lr=0)


def test_train_step_updates_all_nets_and_reports(layout):
    cfg = tiny()
    models = Models.build(cfg)
    state = make_state(models, cfg)
    before = {k: tree_digest(t) for k, t in models.trees().items()}
    report = train_step(state, first_batch(layout, cfg), models, cfg)
    after = {k: tree_digest(t) for k, t in models.trees().items()}
    assert all(before[k] != after[k] for k in before)
    assert report.identity_gap() <= COMPOSITION_TOL
    assert report.lambda_sup == 1.0 and state.global_step == 1
    assert all(p.requires_grad for p in models.D_P.parameters())
    # the projection head and extractor are distinct: the extractor never trains
    assert all(not p.requires_grad for p in models.extractor.parameters())


def test_discriminator_gradients_come_from_their_own_objective(layout):
    cfg = tiny()
    models = Models.build(cfg)
    state = make_state(models, cfg)
    batch = first_batch(layout, cfg)
    train_step(state, batch, models, cfg)
    # zero_grad clears D gradients before the D phase; the G phase leaves them alone
    assert all(p.grad is not None for p in models.D_P.parameters())
    grads = [p.grad.clone() for p in models.D_U.parameters()]
    for p in models.D_U.parameters():
        assert p.grad is not None
    assert any(float(g.abs().max()) > 0 for g in grads)


def test_zero_lambda_supervised_branch_has_no_effect(layout):
    cfg = tiny(epochs=21)
    batch = first_batch(layout, cfg)
    outs = []
    for mask in (False, True):
        models = Models.build(cfg)
        state = make_state(models, cfg)
        state.epoch = 21
        report = train_step(state, batch, models, cfg, sup_mask=mask)
        outs.append((tree_digest(models.trees()["G"]), report))
    assert outs[0][1].lambda_sup == 0.0
    assert outs[0][0] == outs[1][0]
    assert outs[0][1]["total"] == outs[0][1]["unsup_total"]


def test_total_losses_does_not_update(layout):
    cfg = tiny()
    models = Models.build(cfg)
    before = tree_digest(models.trees()["G"])
    rep = total_losses(first_batch(layout, cfg), models, cfg, t=11)
    assert tree_digest(models.trees()["G"]) == before
    assert rep.lambda_sup == lambda_sup(11)
    assert rep.identity_gap() <= COMPOSITION_TOL


def test_non_finite_loss_raises(layout):
    cfg = tiny()
    models = Models.build(cfg)
    with torch.no_grad():
        models.D_P.net[0].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(make_state(models, cfg), first_batch(layout, cfg), models, cfg)
    assert info.value.component == "cgan_d"


def test_checkpoint_restore_roundtrip(layout, tmp_path):
    cfg = tiny()
    models = Models.build(cfg)
    state = make_state(models, cfg)
    train_step(state, first_batch(layout, cfg), models, cfg)
    path = ck.save(tmp_path / "a.ckpt", state_to_checkpoint(models, state, cfg))
    cfg2, models2, state2 = restore(ck.load(path))
    assert cfg2 == cfg and state2.global_step == 1
    for k, tree in models.trees().items():
        assert tree_digest(tree) == tree_digest(models2.trees()[k])
    assert torch.equal(state2.opt["G"].state.m["head.1.weight"], state.opt["G"].state.m["head.1.weight"])


@pytest.fixture(scope="module")
def run(layout, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return fit(tiny(), layout, out / "a"), out


def test_fit_writes_run_directory(run):
    result, _ = run
    d = result.run_dir
    assert (d / "manifest.tsv").is_file()
    assert sorted(p.name for p in (d / "samples").iterdir()) == ["epoch_001.png", "epoch_002.png"]
    assert latest_checkpoint(d) == result.checkpoint == d / "ckpt" / "step_0000006.ckpt"
    rows = list(csv.reader((d / "metrics.csv").open()))
    assert tuple(rows[0]) == METRICS_HEADER
    assert len(rows) == 7
    metrics = read_metrics(d / "metrics.csv")
    assert [r["lambda_sup"] for r in metrics] == [lambda_sup(1)] * 3 + [lambda_sup(2)] * 3
    for r in metrics:
        assert abs(r["total"] - (r["unsup_total"] + r["lambda_sup"] * r["sup_total"])) <= COMPOSITION_TOL


def test_fit_is_deterministic_and_resumable(run, layout):
    result, out = run
    want = (result.run_dir / "metrics.csv").read_bytes()
    again = fit(tiny(), layout, out / "b")
    assert (again.run_dir / "metrics.csv").read_bytes() == want
    partial = fit(tiny(), layout, out / "c", stop_after=4)
    assert partial.checkpoint.name == "step_0000004.ckpt"
    resumed = fit(tiny(), layout, out / "c", resume=partial.checkpoint)
    assert (resumed.run_dir / "metrics.csv").read_bytes() == want
    assert tree_digest(load_generator(resumed.checkpoint).state_dict()) == \
        tree_digest(load_generator(result.checkpoint).state_dict())


def test_resume_with_different_config_refused(run, layout, tmp_path):
    result, _ = run
    with pytest.raises(TrainingError):
        fit(dataclasses.replace(tiny(), lr=1e-3), layout, tmp_path, resume=result.checkpoint)


def test_infer_mirrors_filenames_and_is_deterministic(run, layout, tmp_path):
    result, _ = run
    inputs = sorted(layout.unpaired_src_dir.glob("*.png"))
    a = infer(result.checkpoint, inputs, tmp_path / "a")
    b = infer(result.checkpoint, inputs, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in inputs]
    for pa, pb, src in zip(a, b, inputs):
        assert pa.read_bytes() == pb.read_bytes()
        assert load_image(pa).shape == load_image(src).shape


def test_infer_rejects_indivisible_size(run, tmp_path):
    from odecut.data import save_image
    result, _ = run
    save_image(torch.zeros(3, 10, 12), tmp_path / "odd.png")
    with pytest.raises(SizeError):
        infer(result.checkpoint, [tmp_path / "odd.png"], tmp_path / "out")
