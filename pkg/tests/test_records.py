import json

import pytest

from src.config.schema import DatasetConfig, SceneConfig
from src.core.errors import ArtifactExistsError, GeometryError
from src.data.records import (
    DETECTION_SHARD, SEED_STRIDE, DatasetRecord, build_dataset, ingest_external, load_dataset, read_manifest,
    split_sizes,
)

SCENE = SceneConfig(width=32, height=32, max_objects=3)


def test_split_sizes_floor_val_and_test():
    assert split_sizes(10, 0.2, 0.2) == {"train": 6, "val": 2, "test": 2}
    assert split_sizes(7, 0.1, 0.1) == {"train": 7, "val": 0, "test": 0}


def test_build_dataset_shards_and_seeds(dataset):
    assert [len(dataset.split(name)) for name in ("train", "val", "test")] == [8, 4, 4]
    assert len(dataset.split(DETECTION_SHARD)) == 4
    assert all(not r.expressions for r in dataset.split(DETECTION_SHARD))
    assert all(r.expressions for r in dataset.split("train"))
    seeds = [r.seed for name in ("train", "val", "test", DETECTION_SHARD) for r in dataset.split(name)]
    assert seeds == list(range(16 + 4))


def test_splits_are_disjoint(dataset):
    hashes = {name: {r.content_hash() for r in dataset.split(name)} for name in ("train", "val", "test")}
    assert not hashes["train"] & hashes["val"]
    assert not hashes["train"] & hashes["test"]
    assert not hashes["val"] & hashes["test"]


def test_same_config_gives_same_corpus_hash(tmp_path, small_dataset_config):
    first = build_dataset(str(tmp_path / "a"), small_dataset_config, SCENE)
    second = build_dataset(str(tmp_path / "b"), small_dataset_config, SCENE)
    assert first["corpus_hash"] == second["corpus_hash"]
    assert first["shards"] == second["shards"]
    other = build_dataset(str(tmp_path / "c"), small_dataset_config.model_copy(update={"seed": 8}), SCENE)
    assert other["corpus_hash"] != first["corpus_hash"]
    assert load_dataset(str(tmp_path / "c")).split("train")[0].seed == 8 * SEED_STRIDE


def test_detection_only_has_no_expressions(tmp_path):
    config = DatasetConfig(num_scenes=5, val_ratio=0.2, test_ratio=0.2, detection_only=True)
    build_dataset(str(tmp_path), config, SCENE)
    data = load_dataset(str(tmp_path))
    for name in ("train", "val", "test"):
        assert all(not r.expressions for r in data.split(name))


def test_existing_dataset_needs_force(tmp_path, small_dataset_config):
    build_dataset(str(tmp_path), small_dataset_config, SCENE)
    with pytest.raises(ArtifactExistsError):
        build_dataset(str(tmp_path), small_dataset_config, SCENE)
    build_dataset(str(tmp_path), small_dataset_config, SCENE, force=True)


def test_images_match_canvas(dataset):
    record = dataset.split("val")[0]
    image = dataset.image(record)
    assert image.shape == (record.canvas.height, record.canvas.width, 3)
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_record_json_round_trip(dataset):
    for record in dataset.split("test"):
        assert DatasetRecord.from_json(json.loads(json.dumps(record.to_json()))) == record


def test_malformed_records_are_rejected(dataset):
    data = dataset.split("train")[0].to_json()
    data["expressions"] = [{"text": "the red circle", "target_index": 9}]
    with pytest.raises(GeometryError):
        DatasetRecord.from_json(data)
    data = dataset.split("train")[0].to_json()
    data["objects"][0]["box"] = [0, 0, 500, 500]
    with pytest.raises(GeometryError):
        DatasetRecord.from_json(data)
    with pytest.raises(GeometryError):
        DatasetRecord.from_json({"id": "x"})


def test_ingest_external_anchors_relative_images(tmp_path, dataset):
    source = tmp_path / "external.jsonl"
    records = dataset.split("train")[:2] + dataset.split("test")[:1]
    with open(source, "w", encoding="utf-8") as f:
        for record in records:
            entry = record.to_json()
            entry["image"] = f"{dataset.root}/{record.image}"
            f.write(json.dumps(entry) + "\n")
    manifest = ingest_external(str(source), str(tmp_path / "ingested"))
    assert manifest["shards"]["train"]["records"] == 2
    assert manifest["shards"]["test"]["records"] == 1
    assert read_manifest(str(tmp_path / "ingested"))["corpus_hash"] == manifest["corpus_hash"]
    ingested = load_dataset(str(tmp_path / "ingested"))
    assert ingested.image(ingested.split("train")[0]).shape == (32, 32, 3)


def test_load_missing_dataset_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path / "nowhere"))
