import csv
import os

import numpy as np
import pytest
import torch

from src.cli.presets import PRESETS
from src.config.schema import PARAM_GROUPS, RunConfig, run_config_from_dict
from src.core.errors import SplitOverlapError, StageOrderError
from src.core.losses import lm_cross_entropy
from src.core.textio import normalize_text
from src.data.checkpoint import ROLE_COMPREHENDER, ROLE_GENERATOR, ROLE_MODEL, load_checkpoint
from src.data.records import build_dataset, load_dataset
from src.evaluation.metrics import rec_requests
from src.evaluation.predictors import OraclePredictor
from src.training import trainer
from src.training.run_log import LOSS_COLUMNS, LOSS_LOG_NAME
from src.training.samples import GroundingDataset, collate, det_caption_samples, rec_samples
from src.training.trainer import (
    evaluate_checkpoint, new_model, predictor_from_checkpoint, run_activation_stage, run_cycle_stage,
)


def _with(config, **sections):
    return run_config_from_dict(sections, base=config)


@pytest.fixture(scope="module")
def activation(tmp_path_factory, dataset_dir, tiny_config, vocab):
    out = str(tmp_path_factory.mktemp("activation"))
    return run_activation_stage(load_dataset(dataset_dir), tiny_config, out, vocab)


def test_activation_writes_checkpoint_and_loss_log(activation):
    assert os.path.exists(activation.checkpoint_path)
    log_path = os.path.join(os.path.dirname(activation.checkpoint_path), LOSS_LOG_NAME)
    with open(log_path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOSS_COLUMNS == ("step", "lm", "itc", "itg", "itm", "cyc_box", "cyc_text", "total")
    assert len(rows) - 1 == activation.step
    columns = {name: [float(row[i]) for row in rows[1:]] for i, name in enumerate(rows[0])}
    assert all(v > 0 for v in columns["lm"])
    assert all(v == 0 for v in columns["itg"])
    assert columns["total"] == columns["lm"]
    checkpoint = load_checkpoint(activation.checkpoint_path)
    assert checkpoint.stages == ("activation",)
    assert checkpoint.roles == [ROLE_MODEL]
    assert checkpoint.id == activation.checkpoint_id


def test_activation_is_deterministic(tmp_path, dataset, tiny_config, vocab, activation):
    again = run_activation_stage(dataset, tiny_config, str(tmp_path), vocab)
    assert again.checkpoint_id == activation.checkpoint_id


def test_frozen_model_does_not_move(tmp_path, dataset, tiny_config, vocab):
    config = _with(tiny_config, train={"freeze": list(PARAM_GROUPS)})
    result = run_activation_stage(dataset, config, str(tmp_path), vocab)
    reference = new_model(config, vocab, config.train)
    trained = load_checkpoint(result.checkpoint_path).model_state(ROLE_MODEL)
    for name, tensor in reference.state_dict().items():
        assert torch.equal(trained[name], tensor), name


def test_lm_decreases_when_overfitting_one_batch(dataset, tiny_config, vocab):
    model = new_model(tiny_config, vocab, tiny_config.train)
    samples = det_caption_samples(dataset.split("train")[:4])
    batch = collate([GroundingDataset(samples, dataset, vocab, 128).encode(s) for s in samples])
    optimizer = torch.optim.SGD(model.parameters(), lr=0.02)
    losses = []
    for _ in range(50):
        logits = model(batch.images, batch.text_ids, batch.dec_in)
        loss = lm_cross_entropy(logits, batch.targets, batch.answer_mask)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_cycle_requires_activation(tmp_path, dataset, tiny_config, vocab):
    with pytest.raises(StageOrderError):
        run_cycle_stage(dataset, tiny_config, str(tmp_path), vocab, str(tmp_path / "missing.ckpt"))


def test_cycle_stage_trains_both_roles(tmp_path, dataset, tiny_config, vocab, activation):
    config = _with(tiny_config, cycle={"pseudo_start_epoch": 0, "reg_supervision": True})
    result = run_cycle_stage(dataset, config, str(tmp_path), vocab, activation.checkpoint_path)
    checkpoint = load_checkpoint(result.checkpoint_path)
    assert checkpoint.stages == ("activation", "cycle")
    assert checkpoint.roles == sorted([ROLE_COMPREHENDER, ROLE_GENERATOR])
    assert checkpoint.lineage["parent"] == load_checkpoint(activation.checkpoint_path).id
    assert result.cycle_history and result.cycle_history[0][0] == activation.step
    assert len(result.pseudo_reports) == 1


def test_default_cycle_keeps_the_generator_frozen(tmp_path, dataset, tiny_config, vocab, activation):
    assert not tiny_config.cycle.reg_supervision
    result = run_cycle_stage(dataset, tiny_config, str(tmp_path), vocab, activation.checkpoint_path)
    checkpoint = load_checkpoint(result.checkpoint_path)
    parent = load_checkpoint(activation.checkpoint_path)
    generator = checkpoint.model_state(ROLE_GENERATOR)
    for name, tensor in parent.model_state(ROLE_MODEL).items():
        assert torch.equal(generator[name], tensor), name
    assert ROLE_GENERATOR not in checkpoint.optimizer_meta
    assert any(not torch.equal(checkpoint.model_state(ROLE_COMPREHENDER)[name], tensor)
               for name, tensor in parent.model_state(ROLE_MODEL).items())


def test_cycle_weight_without_backprop_leaves_updates_unchanged(tmp_path, dataset, tiny_config, vocab, activation):
    base = {"cycle_backprop": False, "weights": {"lm": 1.0, "itc": 0.0, "itg": 1.0, "itm": 0.0}}
    with_cycle = _with(tiny_config, cycle={**base, "weights": {**base["weights"], "cyc": 1.0}})
    without = _with(tiny_config, cycle={**base, "weights": {**base["weights"], "cyc": 0.0}})
    a = run_cycle_stage(dataset, with_cycle, str(tmp_path / "a"), vocab, activation.checkpoint_path)
    b = run_cycle_stage(dataset, without, str(tmp_path / "b"), vocab, activation.checkpoint_path)
    arrays_a = load_checkpoint(a.checkpoint_path).arrays
    arrays_b = load_checkpoint(b.checkpoint_path).arrays
    assert arrays_a.keys() == arrays_b.keys()
    for name in arrays_a:
        assert (arrays_a[name] == arrays_b[name]).all(), name


def test_evaluate_checkpoint_stamps_reports(dataset, vocab, activation):
    views = evaluate_checkpoint(activation.checkpoint_path, dataset, "test", vocab)
    assert set(views) == {"test", "testA", "testB"}
    report, outcomes = views["test"]
    assert report.checkpoint_id == activation.checkpoint_id
    assert report.corpus_hash == dataset.corpus_hash
    assert report.n_samples == len(outcomes) == sum(len(r.expressions) for r in dataset.split("test"))
    assert views["testA"][0].n_samples + views["testB"][0].n_samples == report.n_samples


def test_evaluate_refuses_training_records(dataset, vocab, activation):
    with pytest.raises(SplitOverlapError):
        evaluate_checkpoint(activation.checkpoint_path, dataset, "train", vocab)

def _assert_same_arrays(path_a, path_b):
    a, b = load_checkpoint(path_a), load_checkpoint(path_b)
    assert a.arrays.keys() == b.arrays.keys()
    for name in a.arrays:
        np.testing.assert_allclose(a.arrays[name], b.arrays[name], rtol=1e-5, atol=1e-6, err_msg=name)
    return a, b


def test_activation_resume_continues_the_epoch_counter(tmp_path, dataset, tiny_config, vocab):
    config = _with(tiny_config, train={"epochs": 2, "checkpoint_every": 1})
    full = run_activation_stage(dataset, config, str(tmp_path / "full"), vocab)
    midpoint = os.path.join(str(tmp_path), "full", "checkpoints", "epoch-001.ckpt")
    first_epoch = load_checkpoint(midpoint)
    assert first_epoch.epoch == 1

    resumed = run_activation_stage(dataset, config, str(tmp_path / "resumed"), vocab, resume=midpoint)
    assert (resumed.epoch, resumed.step) == (2, full.step)
    assert len(resumed.epoch_losses) == 1
    with open(os.path.join(str(tmp_path), "resumed", LOSS_LOG_NAME), newline="", encoding="utf-8") as f:
        steps = [int(row["step"]) for row in csv.DictReader(f)]
    assert steps == list(range(first_epoch.step + 1, full.step + 1))
    _assert_same_arrays(full.checkpoint_path, resumed.checkpoint_path)


def test_cycle_resume_keeps_optimizer_and_pseudo_labels(tmp_path, monkeypatch, dataset, tiny_config, vocab,
                                                        activation):
    label = trainer.generate_pseudo_labels
    monkeypatch.setattr(trainer, "generate_pseudo_labels",
                        lambda _labeler, *args, **kwargs: label(OraclePredictor(), *args, **kwargs))
    # default cycle weights train the scalar ITC temperature
    config = _with(tiny_config, cycle={"epochs": 2, "checkpoint_every": 1, "pseudo_start_epoch": 0,
                                          "reg_supervision": True})
    assert config.cycle.weights.itc > 0
    full = run_cycle_stage(dataset, config, str(tmp_path / "full"), vocab, activation.checkpoint_path)
    midpoint = os.path.join(str(tmp_path), "full", "checkpoints", "epoch-001.ckpt")
    saved_labels = load_checkpoint(midpoint).lineage["pseudo_labels"]
    assert len(saved_labels) == full.pseudo_reports[0].retained > 0

    resumed = run_cycle_stage(dataset, config, str(tmp_path / "resumed"), vocab, activation.checkpoint_path,
                              resume=midpoint)
    assert (resumed.epoch, resumed.step) == (2, full.step)
    assert not resumed.pseudo_reports
    a, b = _assert_same_arrays(full.checkpoint_path, resumed.checkpoint_path)
    assert a.lineage == b.lineage
    assert b.lineage["pseudo_labels"] == saved_labels



@pytest.mark.slow
def test_overfit_preset_memorises_its_corpus(tmp_path, vocab):
    config = run_config_from_dict(PRESETS["overfit"], base=RunConfig())
    build_dataset(str(tmp_path / "data"), config.dataset, config.scene)
    data = load_dataset(str(tmp_path / "data"))
    activation = run_activation_stage(data, config, str(tmp_path / "activation"), vocab)
    result = run_cycle_stage(data, config, str(tmp_path / "cycle"), vocab, activation.checkpoint_path)
    assert result.step - activation.step == 500

    predictor = predictor_from_checkpoint(load_checkpoint(result.checkpoint_path), vocab)
    records = data.split("train")
    answers = predictor.locate(rec_requests(data, records))
    expected = [normalize_text(s.target) for s in rec_samples(records)]
    assert len(expected) == 32
    assert answers == expected
