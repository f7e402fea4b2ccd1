import pytest

from odecut import cli
from odecut import config as cfgmod
from odecut.verify import Check

TINY = ["--fixtures", "--size", "32", "--epochs", "1", "--steps", "2", "--seed", "3",
        "--set", "model.base_channels=4", "--set", "train.disc_channels=4", "--set", "train.embed_dim=16",
        "--set", "loss.n_patches=8", "--set", "train.batch_size=2", "--set", "data.fixture_n=4"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_help_lists_every_key_with_default(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    for name, key in cfgmod.KEYS.items():
        assert name in out
    assert "loss.tau                  default: 0.07" in out
    code, out, _ = run(capsys, "train", "--help")
    assert code == 0 and "solver.rtol" in out and "--lambda-perc" in out


def test_verify_params(capsys):
    code, out, _ = run(capsys, "verify", "params")
    assert code == 0
    assert "5,477,379" in out and "11,378,179" in out
    assert out.startswith("==== verify params ====")


def test_verify_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setitem(cli.SUITES, "params", lambda: [Check("x", False, "broken")])
    code, out, _ = run(capsys, "verify", "params")
    assert code == cli.EXIT_VERIFY and "[FAIL] x" in out


def test_usage_and_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nbogus = 1\n")
    code, _, err = run(capsys, "train", "--config", str(bad), "--fixtures", "--out", str(tmp_path))
    assert code == cli.EXIT_USAGE and "train.bogus" in err
    code, _, err = run(capsys, "train", "--set", "model.nope=3", "--fixtures", "--out", str(tmp_path))
    assert code == cli.EXIT_USAGE and "model.nope" in err
    code, _, err = run(capsys, "train", "--set", "train.lr=fast", "--fixtures", "--out", str(tmp_path))
    assert code == cli.EXIT_USAGE and "train.lr" in err
    code, _, _ = run(capsys, "train", "--set", "noequals", "--fixtures", "--out", str(tmp_path))
    assert code == cli.EXIT_USAGE
    code, _, _ = run(capsys, "train", "--out", str(tmp_path))
    assert code == cli.EXIT_USAGE
    code, _, _ = run(capsys, "nonsense")
    assert code == cli.EXIT_USAGE
    code, _, _ = run(capsys, "train", "--epochs", "30", "--fixtures", "--out", str(tmp_path))
    assert code == cli.EXIT_USAGE


def test_runtime_errors(capsys, tmp_path):
    code, _, err = run(capsys, "infer", "--checkpoint", str(tmp_path / "missing"), "--input", str(tmp_path),
                       "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_RUNTIME
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "none"), "--out", str(tmp_path), "--name", "r")
    assert code == cli.EXIT_RUNTIME and "DataError" in err


def test_config_file_and_flag_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nseed = 5\nlr = 0.001\n[solver]\nmethod = rk4\n")
    args = cli.build_parser().parse_args(["train", "--config", str(ini), "--seed", "9", "--preset", "smoke"])
    s = cli.settings_from_args(args)
    assert s.values["train.seed"] == 9 and s.values["train.lr"] == 0.001
    assert s.values["data.image_size"] == 32
    assert s.solver().method.value == "rk4"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert cli.main(["train", *TINY, "--out", str(out), "--name", "a"]) == 0
    return out


def test_train_writes_run_directory(trained):
    d = trained / "a"
    for name in ("config.echo", "metrics.csv", "manifest.tsv"):
        assert (d / name).is_file()
    assert list((d / "ckpt").glob("*.ckpt")) and list((d / "samples").glob("*.png"))
    echo = (d / "config.echo").read_text()
    assert "[train]" in echo and "seed = 3" in echo and "base_channels = 4" in echo


def test_train_rerun_is_bitwise_identical(trained):
    assert cli.main(["train", *TINY, "--out", str(trained), "--name", "b"]) == 0
    assert (trained / "a" / "metrics.csv").read_bytes() == (trained / "b" / "metrics.csv").read_bytes()


def test_infer_report_bench(trained, capsys, tmp_path):
    run_dir = trained / "a"
    code, out, _ = run(capsys, "infer", "--checkpoint", str(run_dir), "--input", str(run_dir / "fixtures" / "unpaired_src"),
                       "--out", str(tmp_path / "inf"), "--solver", "rk4", "--step", "0.25")
    assert code == 0 and "images: 2" in out
    assert len(list((tmp_path / "inf").glob("*.png"))) == 2
    code, out, _ = run(capsys, "report", "--run", str(run_dir))
    assert code == 0 and (run_dir / "report" / "losses.png").stat().st_size > 0
    assert "steps: 2" in out
    code, out, _ = run(capsys, "bench", "--checkpoint", str(run_dir), "--size", "32", "--runs", "5",
                       "--out", str(tmp_path / "bench"))
    assert code == 0 and "Hardware" in out and "Model Parameters (M)" in out
    for name in ("bench.csv", "bench.txt", "bench.png"):
        assert (tmp_path / "bench" / name).is_file()


def test_bench_fresh_model_param_column_matches_verify(capsys):
    code, out, _ = run(capsys, "bench", "--size", "32", "--runs", "5", "--set", "bench.n_warm=0",
                       "--bottleneck", "resnet")
    assert code == 0 and "11.378" in out


def test_fixtures_and_odedemo(capsys, tmp_path):
    code, out, _ = run(capsys, "fixtures", "--out", str(tmp_path / "fx"), "--n", "4", "--size", "16")
    assert code == 0 and out.count(": 4") == 2 and out.count(": 2") == 2
    code, out, _ = run(capsys, "odedemo", "--out", str(tmp_path))
    assert code == 0 and "dopri5,rtol=1e-09" in out
    assert (tmp_path / "odedemo.png").is_file()


def test_gradcheck_ops_only(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops-only")
    assert code == 0 and "generator" not in out and "[PASS] grad conv2d" in out
