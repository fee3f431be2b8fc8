import argparse
import csv
import json
import os

import pytest

from main import build_parser, main
from src.cli.commands import (
    ABLATION_SPLITS, ablation_configs, cmd_infer, exit_code_for, resolve_config, run_command,
    write_ablation_table,
)
from src.config.schema import save_run_config
from src.config.settings import (
    ENABLE_FILE_LOGS, EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_SPLIT_OVERLAP, EXIT_STAGE_ORDER, EXIT_VALIDATION,
)
from src.core.errors import (
    ArtifactExistsError, CheckpointFormatError, ConfigError, SplitOverlapError, StageOrderError,
    TrainingDivergedError,
)
from src.core.model import build_model
from src.data.checkpoint import ROLE_MODEL, Checkpoint, pack_model, save_checkpoint
from src.evaluation.metrics import read_report
from src.training.trainer import with_vocab


@pytest.fixture
def config_path(tmp_path, tiny_config):
    path = str(tmp_path / "tiny.json")
    save_run_config(tiny_config, path)
    return path


@pytest.fixture
def untrained_checkpoint(tmp_path, tiny_config, vocab):
    config = with_vocab(tiny_config, vocab)
    model = build_model(config.model, seed=0)
    path = str(tmp_path / "untrained.ckpt")
    save_checkpoint(path, Checkpoint(config, vocab.fingerprint(), stages=("activation",),
                                     arrays=pack_model(ROLE_MODEL, model)))
    return path


def _args(**values):
    defaults = {"preset": None, "config": None, "seed": None, "out": None, "force": False,
                "beam_width": None, "max_new_tokens": None}
    return argparse.Namespace(**{**defaults, **values})


def test_config_precedence(tmp_path):
    path = tmp_path / "override.json"
    path.write_text('{"train": {"lr": 0.5}, "model": {"heads": 2}}', encoding="utf-8")
    config = resolve_config(_args(preset="smoke", config=str(path), seed=9, beam_width=3))
    assert config.model.d == 32  # preset
    assert config.model.heads == 2  # config file over preset
    assert config.train.lr == 0.5
    assert (config.seed, config.dataset.seed, config.train.seed, config.cycle.seed) == (9, 9, 9, 9)
    assert config.beam.beam_width == 3
    assert config.beam.max_new_tokens == 24


def test_missing_config_file_maps_to_io_error(tmp_path):
    code = run_command(lambda args, config: EXIT_OK, _args(config=str(tmp_path / "nope.json")))
    assert code == EXIT_IO


@pytest.mark.parametrize("error,code", [
    (StageOrderError("x"), EXIT_STAGE_ORDER),
    (SplitOverlapError("x"), EXIT_SPLIT_OVERLAP),
    (TrainingDivergedError("x"), EXIT_DIVERGED),
    (CheckpointFormatError("x"), EXIT_IO),
    (FileNotFoundError("x"), EXIT_IO),
    (ArtifactExistsError("x"), EXIT_IO),
    (ConfigError("x"), EXIT_VALIDATION),
    (ValueError("x"), EXIT_VALIDATION),
])
def test_exit_codes(error, code, capsys):
    assert exit_code_for(error) == code

    def handler(args, config):
        raise error

    assert run_command(handler, _args()) == code
    assert "❌" in capsys.readouterr().out


def test_generate_then_oracle_eval(tmp_path, config_path):
    out = str(tmp_path / "run")
    assert main(["generate", "--config", config_path, "--out", out]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "data", "vocab.txt"))
    assert main(["generate", "--config", config_path, "--out", out]) == EXIT_IO
    assert main(["eval", "--oracle", "--split", "test", "--cycle-samples", "5",
                 "--config", config_path, "--out", out]) == EXIT_OK
    for name in ("test", "testA", "testB"):
        assert os.path.exists(os.path.join(out, "reports", f"{name}.txt"))
    report = read_report(os.path.join(out, "reports", "test.txt"))
    assert report.acc_at_05 == 1.0
    assert report.checkpoint_id == "oracle"
    assert report.cycle_box.mean == 0.0
    if ENABLE_FILE_LOGS:
        with open(os.path.join(out, "events.jsonl"), encoding="utf-8") as f:
            events = [json.loads(line) for line in f]
        assert [e["view"] for e in events if e["kind"] == "eval"] == ["test", "testA", "testB"]


def test_train_reports_are_byte_identical_across_runs(tmp_path, config_path):
    reports = []
    for name in ("first", "second"):
        out = str(tmp_path / name)
        assert main(["generate", "--config", config_path, "--out", out]) == EXIT_OK
        assert main(["train", "--config", config_path, "--out", out]) == EXIT_OK
        report_dir = os.path.join(out, "activation", "reports")
        with open(os.path.join(report_dir, "val.txt"), "rb") as f, \
                open(os.path.join(report_dir, "val.ious.csv"), "rb") as g:
            reports.append((f.read(), g.read()))
    assert reports[0] == reports[1]
    assert b"checkpoint_id: " in reports[0][0]


def test_cycle_before_train_exits_with_stage_order(tmp_path, config_path):
    out = str(tmp_path / "run")
    assert main(["generate", "--config", config_path, "--out", out]) == EXIT_OK
    assert main(["cycle", "--config", config_path, "--out", out]) == EXIT_STAGE_ORDER
    assert main(["eval", "--config", config_path, "--out", out]) == EXIT_IO


def test_parser_requires_one_query():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["infer", "--scene-seed", "1"])
    with pytest.raises(SystemExit):
        parser.parse_args(["infer", "--scene-seed", "1", "--expr", "the red circle", "--region", "0,0,1,1"])
    args = parser.parse_args(["infer", "--scene-seed", "1", "--expr", "the red circle", "--beam-width", "1"])
    assert args.beam_width == 1 and args.checkpoint is None


def _infer_args(checkpoint, config_path, **values):
    defaults = {"checkpoint": checkpoint, "config": config_path, "vocab": None, "image": None, "scene_seed": 3,
                "expr": None, "question": None, "region": None, "beam_width": 1, "max_new_tokens": 1}
    return _args(**{**defaults, **values})


def test_infer_reports_unparsed_box(untrained_checkpoint, config_path, capsys):
    args = _infer_args(untrained_checkpoint, config_path, expr="the red circle")
    assert run_command(cmd_infer, args) == EXIT_OK
    out = capsys.readouterr().out
    assert "question: where is the red circle in the image?" in out
    assert "box: no box parsed" in out


def test_infer_region_query(untrained_checkpoint, config_path, capsys):
    args = _infer_args(untrained_checkpoint, config_path, region="100,200,300,400")
    assert run_command(cmd_infer, args) == EXIT_OK
    out = capsys.readouterr().out
    assert "question: what is in the region of [100, 200, 300, 400]?" in out.lower().replace(" ?", "?")
    assert "expression: no expression parsed" in out


def test_infer_rejects_bad_region(untrained_checkpoint, config_path):
    args = _infer_args(untrained_checkpoint, config_path, region="1,2,3")
    assert run_command(cmd_infer, args) == EXIT_VALIDATION


def test_ablation_ladder(tiny_config):
    rows = ablation_configs(tiny_config)
    assert [name for name, _ in rows] == ["coordinates activation", "+ cycle training", "+ data augmentation"]
    first, second, third = (config.cycle for _, config in rows)
    assert first.weights.itg == 0.0 and not first.reg_supervision and not first.cycle_backprop
    assert second.reg_supervision and second.cycle_backprop and second.pseudo_start_epoch is None
    assert third.pseudo_start_epoch == 0
    assert all(config.train == tiny_config.train for _, config in rows)


def test_ablation_table(tmp_path):
    rows = [{"condition": name, "corpus_hash": "abc", **{s: "0.5000" for s in ABLATION_SPLITS}}
            for name in ("a", "b", "c")]
    csv_path, md_path = write_ablation_table(rows, str(tmp_path))
    with open(csv_path, newline="", encoding="utf-8") as f:
        table = list(csv.DictReader(f))
    assert len(table) == 3
    assert list(table[0]) == ["condition", "val", "testA", "testB", "test", "corpus_hash"]
    assert open(md_path, encoding="utf-8").read().count("\n") == 5
