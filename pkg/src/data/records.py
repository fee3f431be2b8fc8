"""
Dataset Records
JSONL dataset shards, PNG images, manifests with corpus hashes, and the
ingestion adapter for external annotations in the same schema.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image
from tqdm import tqdm

from ..config.schema import DatasetConfig, SceneConfig, fingerprint
from ..config.settings import status
from ..core.errors import ArtifactExistsError, GeometryError, SceneGenerationError
from ..core.geometry import BBox, Canvas
from .scenegen import (
    Color, RefExpression, Scene, SceneObject, Shape, Size,
    generate_grounded_scene, generate_scene, render,
)

SPLITS = ("train", "val", "test")
DETECTION_SHARD = "detection"
MANIFEST_NAME = "manifest.json"
SEED_STRIDE = 1_000_000


@dataclass(frozen=True)
class ExpressionRecord:
    text: str
    target_index: int


@dataclass(frozen=True)
class DatasetRecord:
    """One scene as stored on disk (one JSONL line)."""
    id: str
    image: str
    canvas: Canvas
    objects: Tuple[SceneObject, ...]
    expressions: Tuple[ExpressionRecord, ...]
    split: str
    seed: Optional[int] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise GeometryError(f"record {self.id}: split must be one of {SPLITS}, got {self.split!r}")
        if not self.objects:
            raise GeometryError(f"record {self.id}: no objects")
        for obj in self.objects:
            obj.box.check_within(self.canvas)
        for expr in self.expressions:
            if not 0 <= expr.target_index < len(self.objects):
                raise GeometryError(f"record {self.id}: target_index {expr.target_index} out of range")

    def scene(self) -> Scene:
        return Scene(self.canvas, self.objects, self.seed if self.seed is not None else -1)

    def to_json(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "image": self.image,
            "canvas": {"W": self.canvas.width, "H": self.canvas.height},
            "objects": [
                {"shape": o.shape.value, "color": o.color.value, "size": o.size.value,
                 "box": list(o.box.as_tuple())}
                for o in self.objects
            ],
            "expressions": [{"text": e.text, "target_index": e.target_index} for e in self.expressions],
            "split": self.split,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "DatasetRecord":
        try:
            canvas = Canvas(int(data["canvas"]["W"]), int(data["canvas"]["H"]))
            objects = tuple(
                SceneObject(Shape(o["shape"]), Color(o["color"]), Size(o["size"]), BBox(*o["box"]))
                for o in data["objects"]
            )
            expressions = tuple(
                ExpressionRecord(e["text"], int(e["target_index"])) for e in data.get("expressions", [])
            )
            return cls(data["id"], data["image"], canvas, objects, expressions, data["split"], data.get("seed"))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, GeometryError):
                raise
            raise GeometryError(f"malformed record {data.get('id', '?')}: {e}") from e

    def content_hash(self) -> str:
        """Short hash of identity and annotation; expressions and split tag are excluded."""
        payload = json.dumps(
            {"id": self.id, "seed": self.seed,
             "canvas": [self.canvas.width, self.canvas.height],
             "objects": self.to_json()["objects"]},
            sort_keys=True, separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def record_from_scene(scene: Scene, expressions: Iterable[RefExpression], split: str,
                      image_path: str) -> DatasetRecord:
    return DatasetRecord(
        id=f"scene-{scene.seed}",
        image=image_path,
        canvas=scene.canvas,
        objects=scene.objects,
        expressions=tuple(ExpressionRecord(e.text, e.target_index) for e in expressions),
        split=split,
        seed=scene.seed,
    )


# --- File helpers ---

def sha256_file(path: str, chunk_size: int = 1024 * 1024) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def save_png(image: np.ndarray, path: str) -> None:
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def write_jsonl(path: str, records: Iterable[DatasetRecord]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str) -> List[DatasetRecord]:
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_json(json.loads(line)))
            except json.JSONDecodeError as e:
                raise GeometryError(f"{path}:{line_no}: invalid JSON ({e})") from e
    return records


def write_manifest(path: str, manifest: Dict[str, Any]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")


def read_manifest(dataset_dir: str) -> Dict[str, Any]:
    with open(os.path.join(dataset_dir, MANIFEST_NAME), 'r', encoding='utf-8') as f:
        return json.load(f)


# --- Split arithmetic ---

def split_sizes(n: int, val_ratio: float, test_ratio: float) -> Dict[str, int]:
    """floor for val and test, the remainder goes to train."""
    n_val = int(n * val_ratio)
    n_test = int(n * test_ratio)
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def _split_of(index: int, sizes: Dict[str, int]) -> str:
    if index < sizes["train"]:
        return "train"
    if index < sizes["train"] + sizes["val"]:
        return "val"
    return "test"


def _detection_scene(seed: int, config: SceneConfig) -> Scene:
    for attempt in range(config.scene_resamples):
        try:
            return generate_scene(seed, config, attempt)
        except SceneGenerationError:
            continue
    raise SceneGenerationError(f"seed {seed}: no placeable scene after {config.scene_resamples} resamples")


def _corpus_hash(shards: Dict[str, Dict[str, Any]], image_hashes: List[str]) -> str:
    hasher = hashlib.sha256()
    for name in sorted(shards):
        hasher.update(f"{name}:{shards[name]['sha256']}\n".encode("utf-8"))
    for digest in image_hashes:
        hasher.update(digest.encode("ascii"))
    return hasher.hexdigest()


def build_dataset(out_dir: str, dataset: DatasetConfig, scene: SceneConfig,
                  force: bool = False) -> Dict[str, Any]:
    """
    Generate images, JSONL shards and a manifest under ``out_dir``.

    Scene i uses seed ``dataset.seed * 1_000_000 + i``; splits are contiguous
    index ranges, so train/val/test seeds never overlap. Detection scenes
    follow after the last test index and carry no expressions.
    """
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not force:
        raise ArtifactExistsError(f"{manifest_path} already exists; pass --force to overwrite")
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)

    sizes = split_sizes(dataset.num_scenes, dataset.val_ratio, dataset.test_ratio)
    by_shard: Dict[str, List[DatasetRecord]] = {name: [] for name in SPLITS}
    image_hashes: List[str] = []
    base_seed = dataset.seed * SEED_STRIDE
    total = dataset.num_scenes + dataset.detection_scenes

    status(f"📂 Generating {total} scenes into {out_dir}")
    for index in tqdm(range(total), desc="scenes", disable=total < 200):
        seed = base_seed + index
        if index < dataset.num_scenes:
            shard = split = _split_of(index, sizes)
            if dataset.detection_only:
                scene_obj, expressions = _detection_scene(seed, scene), []
            else:
                scene_obj, expressions = generate_grounded_scene(seed, scene)
        else:
            shard, split = DETECTION_SHARD, "train"
            scene_obj, expressions = _detection_scene(seed, scene), []
        rel_path = os.path.join("images", f"scene-{seed}.png")
        full_path = os.path.join(out_dir, rel_path)
        save_png(render(scene_obj), full_path)
        image_hashes.append(sha256_file(full_path))
        by_shard.setdefault(shard, []).append(record_from_scene(scene_obj, expressions, split, rel_path))

    shards: Dict[str, Dict[str, Any]] = {}
    for name, records in by_shard.items():
        if name == DETECTION_SHARD and not records:
            continue
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_jsonl(path, records)
        shards[name] = {"path": f"{name}.jsonl", "records": len(records), "sha256": sha256_file(path)}

    manifest = {
        "version": 1,
        "config_fingerprint": fingerprint(dataset) + ":" + fingerprint(scene),
        "dataset": dataset.model_dump(mode="json"),
        "scene": scene.model_dump(mode="json"),
        "shards": shards,
        "corpus_hash": _corpus_hash(shards, image_hashes),
    }
    write_manifest(manifest_path, manifest)
    status(f"""✅ Dataset written ({', '.join(f'{k}={v["records"]}' for k, v in shards.items())})""")
    return manifest


def ingest_external(source_jsonl: str, out_dir: str, force: bool = False) -> Dict[str, Any]:
    """
    Validate external annotations in the DatasetRecord schema and store them
    as a dataset directory. Image paths may be absolute.
    """
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not force:
        raise ArtifactExistsError(f"{manifest_path} already exists; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)
    records = read_jsonl(source_jsonl)
    source_dir = os.path.dirname(os.path.abspath(source_jsonl))
    shards: Dict[str, Dict[str, Any]] = {}
    for split in SPLITS:
        chosen = [r for r in records if r.split == split]
        if not chosen:
            continue
        # relative image paths are re-anchored to the source file's directory
        chosen = [
            r if os.path.isabs(r.image) else DatasetRecord(
                r.id, os.path.join(source_dir, r.image), r.canvas, r.objects, r.expressions, r.split, r.seed)
            for r in chosen
        ]
        path = os.path.join(out_dir, f"{split}.jsonl")
        write_jsonl(path, chosen)
        shards[split] = {"path": f"{split}.jsonl", "records": len(chosen), "sha256": sha256_file(path)}
    manifest = {
        "version": 1,
        "config_fingerprint": "external:" + sha256_file(source_jsonl),
        "shards": shards,
        "corpus_hash": _corpus_hash(shards, []),
    }
    write_manifest(manifest_path, manifest)
    status(f"✅ Ingested {len(records)} external records into {out_dir}")
    return manifest


@dataclass
class LoadedDataset:
    """Records per shard plus a lazily filled image cache."""
    root: str
    manifest: Dict[str, Any]
    shards: Dict[str, List[DatasetRecord]]
    _images: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def corpus_hash(self) -> str:
        return self.manifest.get("corpus_hash", "")

    def split(self, name: str) -> List[DatasetRecord]:
        return self.shards.get(name, [])

    def image(self, record: DatasetRecord) -> np.ndarray:
        if record.id not in self._images:
            path = record.image if os.path.isabs(record.image) else os.path.join(self.root, record.image)
            self._images[record.id] = load_png(path)
        return self._images[record.id]


def load_dataset(dataset_dir: str) -> LoadedDataset:
    manifest_path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}; run `generate` first")
    manifest = read_manifest(dataset_dir)
    shards = {
        name: read_jsonl(os.path.join(dataset_dir, info["path"]))
        for name, info in manifest["shards"].items()
    }
    return LoadedDataset(dataset_dir, manifest, shards)
