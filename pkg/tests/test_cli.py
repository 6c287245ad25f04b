import json

import pytest

from tcr.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from tcr.lattice import transducer_loss
from tcr.serialization import read_lattice_text
from tcr.synthdata import Dataset

SMALL = [
    "--task.V", "3", "--task.F", "4", "--task.n_train", "4", "--task.n_eval", "2",
    "--task.len_range=2,3", "--model.hidden", "5", "--model.joiner", "5", "--model.embed", "3",
    "--train.epochs", "1", "--train.batch_size", "2", "--eval.beam_size", "2",
]  # fmt: skip


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", *SMALL, "--out", str(root / "data.bin")]) == EXIT_OK
    code = main(["train", *SMALL, "--set", "tcr.clamp=1.0", "--data", str(root / "data.bin"), "--out", str(root / "run")])
    assert code == EXIT_OK
    return root


def test_train_writes_run_directory(run_dir):
    run = run_dir / "run"
    for name in ("config.txt", "report.json", "epochs.csv", "steps.csv", "checkpoint.bin", "eval_utterances.csv"):
        assert (run / name).exists(), name
    assert "tcr.clamp = 1.0" in (run / "config.txt").read_text()
    assert f"task.data_path = {run_dir / 'data.bin'}" in (run / "config.txt").read_text()


def test_gen_data_file(run_dir):
    ds = Dataset.load(run_dir / "data.bin")
    assert len(ds.train) == 4 and len(ds.eval) == 2 and ds.spec.F == 4


def test_eval_matches_training_report(run_dir, capsys):
    out = run_dir / "eval"
    assert main(["eval", "--checkpoint", str(run_dir / "run" / "checkpoint.bin"), "--out", str(out)]) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    report = json.loads((run_dir / "run" / "report.json").read_text())
    assert metrics == report["eval"]
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == metrics


def test_eval_beam_one_equals_greedy(run_dir, capsys):
    ck = str(run_dir / "run" / "checkpoint.bin")
    assert main(["eval", "--checkpoint", ck, "--beam-size", "1"]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert metrics["ter_beam"] == metrics["ter_greedy"]


def test_dump_lattice(run_dir):
    out = run_dir / "dump"
    code = main(["dump-lattice", "--checkpoint", str(run_dir / "run" / "checkpoint.bin"),
                 "--example", "eval-1", "--view-seed", "3", "--out", str(out)])  # fmt: skip
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    logp, target = read_lattice_text(out / "view_b.lat")
    assert abs(transducer_loss(logp, target) - summary["views"]["b"]["loss"]) <= 1e-9


def test_compare(tmp_path, capsys):
    code = main(["compare", *SMALL, "--variants", "baseline,tcr", "--seeds", "2", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "| baseline |" in capsys.readouterr().out
    assert (tmp_path / "compare.csv").read_text().count("\n") == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--set", "tcr.clamp=-1"],
        ["train", "--nosuch.key", "1"],
        ["train", "--set", "novalue"],
        ["train", "--train.epochs"],
        ["compare", "--variants", "mystery", "--seeds", "1", "--out", "x"],
    ],
)
def test_config_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_CONFIG


def test_missing_example_is_usage_error(run_dir):
    ck = str(run_dir / "run" / "checkpoint.bin")
    assert main(["dump-lattice", "--checkpoint", ck, "--example", "eval-99", "--out", str(run_dir / "d2")]) == EXIT_CONFIG


def test_io_errors(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.bin")]) == EXIT_IO
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG
    assert main(["train", *SMALL, "--data", str(tmp_path / "absent.bin"), "--out", str(tmp_path / "r")]) == EXIT_IO
    (tmp_path / "garbage.bin").write_bytes(b"not a container")
    assert main(["eval", "--checkpoint", str(tmp_path / "garbage.bin")]) == EXIT_IO


def test_dataset_dimension_mismatch(run_dir, tmp_path):
    argv = ["train", *SMALL, "--task.F", "5", "--data", str(run_dir / "data.bin"), "--out", str(tmp_path / "r")]
    assert main(argv) == EXIT_CONFIG


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    import tcr.training

    def explode(*args, **kwargs):
        raise tcr.training.NumericFailure("boom", tmp_path)

    monkeypatch.setattr(tcr.training, "fit_model", explode)
    assert main(["train", *SMALL, "--out", str(tmp_path / "r")]) == EXIT_NUMERIC
