"""
Pseudo Labels
Referring expressions generated for detection-only scenes, kept only when the
scene matcher resolves them to exactly the source object.
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from ..config.settings import status
from ..core.errors import ExpressionParseError, GeometryError
from ..core.geometry import quantize
from ..core.textio import split_reg_answer
from ..data.records import DatasetRecord, LoadedDataset
from ..data.scenegen import match_expression
from ..evaluation.predictors import DescribeRequest, GroundingPredictor
from .samples import GroundingSample, Provenance, rec_sample


@dataclass(frozen=True)
class RetentionReport:
    generated: int
    retained: int
    rejected_unparseable: int
    rejected_not_unique: int
    generator_id: str

    @property
    def retention_rate(self) -> float:
        return self.retained / self.generated if self.generated else 0.0

    def to_json(self) -> Dict:
        return {**asdict(self), "retention_rate": round(self.retention_rate, 6)}


def generate_pseudo_labels(generator: GroundingPredictor, data: LoadedDataset,
                           records: Sequence[DatasetRecord], generator_id: str,
                           batch_size: int = 64) -> Tuple[List[GroundingSample], RetentionReport]:
    """
    Describe every object box of ``records`` with the generator and keep the
    expressions that parse and uniquely match their source object. Retained
    items become REC samples tagged as pseudo labels.
    """
    targets = [(r, i) for r in records for i in range(len(r.objects))]
    kept: List[GroundingSample] = []
    unparseable = not_unique = 0
    for start in range(0, len(targets), batch_size):
        chunk = targets[start:start + batch_size]
        requests = [DescribeRequest(r, data.image(r), quantize(r.objects[i].box, r.canvas)) for r, i in chunk]
        for (record, index), answer in zip(chunk, generator.describe(requests)):
            expression = split_reg_answer(answer)
            if expression is None:
                unparseable += 1
                continue
            try:
                matches = match_expression(record.scene(), expression)
            except ExpressionParseError:
                unparseable += 1
                continue
            if matches != {index}:
                not_unique += 1
                continue
            kept.append(rec_sample(record, index, expression, Provenance.PSEUDO, generator_id))
    report = RetentionReport(len(targets), len(kept), unparseable, not_unique, generator_id)
    status(f"🔄 Pseudo labels: kept {report.retained}/{report.generated} "
           f"({report.retention_rate:.1%}) from generator {generator_id}")
    return kept, report


PLACEHOLDER