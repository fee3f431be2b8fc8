"""
Evaluation Metrics
Acc@0.5 over parsed boxes, cycle round-trip statistics, and the stable-key
report files.
"""

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..config.defaults import IOU_THRESHOLD
from ..core.errors import SplitOverlapError
from ..core.geometry import BBox, QuantizedBox, dequantize, iou, quantize
from ..core.losses import cycle_consistency, normalized_edit_distance
from ..core.textio import Vocabulary, parse_box, split_reg_answer
from ..data.records import DatasetRecord, LoadedDataset
from ..data.scenegen import QUALIFIERS, parse_expression
from .predictors import DescribeRequest, GroundingPredictor, LocateRequest

QUALIFIER_KEYS = QUALIFIERS + ("none",)
CLEAN, REPAIRED, FAILED = "clean", "repaired", "failed"


def acc_at_iou(predictions: Sequence[Optional[BBox]], ground_truths: Sequence[BBox],
               threshold: float = IOU_THRESHOLD) -> float:
    """Fraction of predictions with IoU strictly above ``threshold``; None counts as a miss."""
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} predictions for {len(ground_truths)} ground truths")
    if not ground_truths:
        return 0.0
    hits = sum(1 for p, g in zip(predictions, ground_truths) if p is not None and iou(p, g) > threshold)
    return hits / len(ground_truths)


@dataclass(frozen=True)
class SampleOutcome:
    """One REC prediction; ``iou`` is 0 for parse failures."""
    record_id: str
    target_index: int
    expression: str
    qualifier: str
    shape: str
    answer: str
    iou: float
    status: str

    @property
    def hit(self) -> bool:
        return self.iou > IOU_THRESHOLD


@dataclass(frozen=True)
class TermStats:
    mean: float
    median: float
    p95: float
    n: int
    unparsed: int = 0

    @classmethod
    def of(cls, values: Sequence[float], unparsed: int = 0) -> "TermStats":
        if not values:
            return cls(0.0, 0.0, 0.0, 0, unparsed)
        arr = np.asarray(values, dtype=np.float64)
        return cls(float(arr.mean()), float(np.median(arr)), float(np.percentile(arr, 95)), len(values), unparsed)


@dataclass
class EvalReport:
    split: str
    n_samples: int
    acc_at_05: float
    mean_iou: float
    parse_failure_rate: float
    repaired_rate: float
    clean_rate: float
    per_qualifier: Dict[str, Tuple[int, float]] = field(default_factory=dict)
    cycle_box: Optional[TermStats] = None
    cycle_text: Optional[TermStats] = None
    checkpoint_id: str = "none"
    config_fingerprint: str = "none"
    corpus_hash: str = "none"

    def to_text(self) -> str:
        lines = [
            f"split: {self.split}",
            f"checkpoint_id: {self.checkpoint_id}",
            f"config_fingerprint: {self.config_fingerprint}",
            f"corpus_hash: {self.corpus_hash}",
            f"n_samples: {self.n_samples}",
            f"acc_at_05: {self.acc_at_05:.4f}",
            f"mean_iou: {self.mean_iou:.4f}",
            f"parse_failure_rate: {self.parse_failure_rate:.4f}",
            f"repaired_rate: {self.repaired_rate:.4f}",
            f"clean_rate: {self.clean_rate:.4f}",
        ]
        for name, stats in (("cycle_box", self.cycle_box), ("cycle_text", self.cycle_text)):
            if stats is None:
                lines.append(f"{name}: n/a")
                continue
            lines += [
                f"{name}.mean: {stats.mean:.4f}",
                f"{name}.median: {stats.median:.4f}",
                f"{name}.p95: {stats.p95:.4f}",
                f"{name}.n: {stats.n}",
                f"{name}.unparsed: {stats.unparsed}",
            ]
        for key in QUALIFIER_KEYS:
            n, acc = self.per_qualifier.get(key, (0, 0.0))
            lines.append(f"qualifier.{key}.n: {n}")
            lines.append(f"qualifier.{key}.acc: {acc:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        values: Dict[str, str] = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(": ")
                values[key] = value

        def stats(name: str) -> Optional[TermStats]:
            if values.get(name) == "n/a":
                return None
            return TermStats(float(values[f"{name}.mean"]), float(values[f"{name}.median"]),
                             float(values[f"{name}.p95"]), int(values[f"{name}.n"]),
                             int(values[f"{name}.unparsed"]))

        return cls(
            split=values["split"],
            n_samples=int(values["n_samples"]),
            acc_at_05=float(values["acc_at_05"]),
            mean_iou=float(values["mean_iou"]),
            parse_failure_rate=float(values["parse_failure_rate"]),
            repaired_rate=float(values["repaired_rate"]),
            clean_rate=float(values["clean_rate"]),
            per_qualifier={
                key: (int(values[f"qualifier.{key}.n"]), float(values[f"qualifier.{key}.acc"]))
                for key in QUALIFIER_KEYS if int(values[f"qualifier.{key}.n"]) > 0
            },
            cycle_box=stats("cycle_box"),
            cycle_text=stats("cycle_text"),
            checkpoint_id=values["checkpoint_id"],
            config_fingerprint=values["config_fingerprint"],
            corpus_hash=values["corpus_hash"],
        )


def build_report(split: str, outcomes: Sequence[SampleOutcome],
                 cycle: Optional[Tuple[TermStats, TermStats]] = None) -> EvalReport:
    n = len(outcomes)
    per_qualifier: Dict[str, Tuple[int, float]] = {}
    for key in QUALIFIER_KEYS:
        group = [o for o in outcomes if o.qualifier == key]
        if group:
            per_qualifier[key] = (len(group), sum(o.hit for o in group) / len(group))

    def rate(status: str, empty: float = 0.0) -> float:
        return sum(o.status == status for o in outcomes) / n if n else empty

    return EvalReport(
        split=split,
        n_samples=n,
        acc_at_05=sum(o.hit for o in outcomes) / n if n else 0.0,
        mean_iou=sum(o.iou for o in outcomes) / n if n else 0.0,
        parse_failure_rate=rate(FAILED),
        repaired_rate=rate(REPAIRED),
        clean_rate=rate(CLEAN, empty=1.0),  # rates sum to 1 even for an empty split
        per_qualifier=per_qualifier,
        cycle_box=cycle[0] if cycle else None,
        cycle_text=cycle[1] if cycle else None,
    )


def split_views(split: str, outcomes: Sequence[SampleOutcome], primary_class: str,
                cycle: Optional[Tuple[TermStats, TermStats]] = None
                ) -> Dict[str, Tuple[EvalReport, List[SampleOutcome]]]:
    """Report for ``split``; the test split also gets testA (primary class targets) and testB (the rest)."""
    views = {split: (build_report(split, outcomes, cycle), list(outcomes))}
    if split == "test":
        group_a = [o for o in outcomes if o.shape == primary_class]
        group_b = [o for o in outcomes if o.shape != primary_class]
        views["testA"] = (build_report("testA", group_a), group_a)
        views["testB"] = (build_report("testB", group_b), group_b)
    return views


def rec_requests(data: LoadedDataset, records: Iterable[DatasetRecord]) -> List[LocateRequest]:
    return [LocateRequest(r, data.image(r), e.text, e.target_index) for r in records for e in r.expressions]


def score_rec(predictor: GroundingPredictor, requests: Sequence[LocateRequest]) -> List[SampleOutcome]:
    """Run REC for every request and score the parsed box against its target."""
    answers = predictor.locate(requests)
    outcomes = []
    for req, answer in zip(requests, answers):
        record = req.record
        target = req.target_index
        if target is None:
            target = next(e.target_index for e in record.expressions if e.text == req.expression)
        parsed = parse_box(answer)
        if parsed is None:
            value, status = 0.0, FAILED
        else:
            value = iou(dequantize(parsed.box, record.canvas), record.objects[target].box)
            status = REPAIRED if parsed.repaired else CLEAN
        outcomes.append(SampleOutcome(
            record_id=record.id,
            target_index=target,
            expression=req.expression,
            qualifier=parse_expression(req.expression).qualifier or "none",
            shape=record.objects[target].shape.value,
            answer=answer,
            iou=value,
            status=status,
        ))
    return outcomes


@dataclass(frozen=True)
class CycleItem:
    record: DatasetRecord
    image: np.ndarray
    target_index: int
    expression: str

    @property
    def box(self) -> QuantizedBox:
        return quantize(self.record.objects[self.target_index].box, self.record.canvas)


@dataclass
class CyclePass:
    """Per-item cycle terms plus the intermediate expressions G(x)."""
    box_terms: List[float]
    text_terms: List[float]
    generated: List[Optional[str]]
    box_unparsed: int = 0
    text_unparsed: int = 0

    def stats(self) -> Tuple[TermStats, TermStats]:
        return TermStats.of(self.box_terms, self.box_unparsed), TermStats.of(self.text_terms, self.text_unparsed)


def cycle_pass(predictor: GroundingPredictor, items: Sequence[CycleItem], vocab: Vocabulary) -> CyclePass:
    """
    Both cycle directions with the predictor's deterministic decoding:
    x -> G(x) -> F(G(x)) for boxes and y -> F(y) -> G(F(y)) for expressions.
    """
    if not items:
        return CyclePass([], [], [])
    boxes = [item.box for item in items]

    # box -> expression -> box
    described = predictor.describe([DescribeRequest(it.record, it.image, q) for it, q in zip(items, boxes)])
    generated = [split_reg_answer(text) for text in described]
    relocated = iter(predictor.locate([
        LocateRequest(it.record, it.image, expr) for it, expr in zip(items, generated) if expr is not None
    ]))
    result = CyclePass([], [], generated)
    for qbox, expr in zip(boxes, generated):
        parsed = parse_box(next(relocated)) if expr is not None else None
        terms = cycle_consistency(qbox, parsed.box if parsed else None, (), ())
        result.box_unparsed += terms.box_unparsed
        result.box_terms.append(terms.box)

    # expression -> box -> expression
    located = [parse_box(text) for text in predictor.locate(
        [LocateRequest(it.record, it.image, it.expression, it.target_index) for it in items])]
    redescribed = iter(predictor.describe([
        DescribeRequest(it.record, it.image, p.box) for it, p in zip(items, located) if p is not None
    ]))
    for item, parsed in zip(items, located):
        if parsed is None:
            result.text_unparsed += 1
            rebuilt = ""
        else:
            rebuilt = split_reg_answer(next(redescribed)) or ""
        result.text_terms.append(normalized_edit_distance(vocab.tokenize(item.expression), vocab.tokenize(rebuilt)))
    return result


def cycle_round_trip(predictor: GroundingPredictor, data: LoadedDataset, records: Sequence[DatasetRecord],
                     sample_count: int, vocab: Vocabulary) -> Tuple[TermStats, TermStats]:
    """Cycle statistics over the first ``sample_count`` expressions of ``records``."""
    items = [
        CycleItem(r, data.image(r), e.target_index, e.text) for r in records for e in r.expressions
    ][:sample_count]
    return cycle_pass(predictor, items, vocab).stats()


def check_disjoint(train_hashes: Iterable[str], records: Iterable[DatasetRecord], split: str) -> None:
    """Refuse to evaluate on records whose content also appears in training."""
    seen = set(train_hashes)
    leaked = sorted({r.id for r in records if r.content_hash() in seen})
    if leaked:
        preview = ", ".join(leaked[:5])
        raise SplitOverlapError(f"{len(leaked)} {split} records also appear in training (e.g. {preview})")


def emit_report(report: EvalReport, path: str, outcomes: Optional[Sequence[SampleOutcome]] = None) -> str:
    """Write the report (and the per-sample IoU CSV next to it when outcomes are given)."""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline="\n") as f:
            f.write(report.to_text())
        if outcomes is not None:
            write_iou_csv(outcomes, iou_csv_path(path))
    except OSError as e:
        raise OSError(f"could not write report {path}: {e}") from e
    return path


def read_report(path: str) -> EvalReport:
    with open(path, 'r', encoding='utf-8') as f:
        return EvalReport.from_text(f.read())


def iou_csv_path(report_path: str) -> str:
    root, _ = os.path.splitext(report_path)
    return root + ".ious.csv"


def write_iou_csv(outcomes: Sequence[SampleOutcome], path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["record_id", "target_index", "qualifier", "shape", "status", "iou", "expression", "answer"])
        for o in outcomes:
            writer.writerow([o.record_id, o.target_index, o.qualifier, o.shape, o.status,
                             f"{o.iou:.6f}", o.expression, o.answer.replace("\n", " ")])
