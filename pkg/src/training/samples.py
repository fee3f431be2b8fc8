"""
Grounding Samples
Instruction/answer pairs built from dataset records for the three training
formats, and their tensor batches.
"""

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from ..core.decode import pad_batch
from ..core.errors import ModelInputError
from ..core.geometry import QuantizedBox, quantize
from ..core.textio import (
    TaskKind, Vocabulary, build_det_captions, build_rec_pair, build_reg_pair,
)
from ..data.records import DatasetRecord, LoadedDataset
from ..data.scenegen import parse_expression


class Provenance(str, Enum):
    GOLD = "gold"
    PSEUDO = "pseudo"


@dataclass(frozen=True)
class GroundingSample:
    record: DatasetRecord
    instruction: str
    target: str
    task: TaskKind
    box: Optional[QuantizedBox] = None
    target_index: Optional[int] = None
    expression: Optional[str] = None
    provenance: Provenance = Provenance.GOLD
    generator_id: Optional[str] = None

    @property
    def target_shape(self) -> Optional[str]:
        if self.target_index is None:
            return None
        return self.record.objects[self.target_index].shape.value

    @property
    def qualifier(self) -> str:
        if self.expression is None:
            return "none"
        return parse_expression(self.expression).qualifier or "none"


def raster_order(record: DatasetRecord) -> List[int]:
    """Object indices sorted top-to-bottom, then left-to-right."""
    return sorted(range(len(record.objects)),
                  key=lambda i: (record.objects[i].box.y1, record.objects[i].box.x1))


def det_caption_sample(record: DatasetRecord) -> GroundingSample:
    """Image-only instruction; the answer lists every object as a caption line."""
    items = [
        (record.objects[i].class_name, quantize(record.objects[i].box, record.canvas))
        for i in raster_order(record)
    ]
    return GroundingSample(record, "", build_det_captions(items), TaskKind.DET_CAPTION)


def reg_sample(record: DatasetRecord, target_index: int, expression: str) -> GroundingSample:
    qbox = quantize(record.objects[target_index].box, record.canvas)
    question, answer = build_reg_pair(qbox, expression)
    return GroundingSample(record, question, answer, TaskKind.REG, qbox, target_index, expression)


def rec_sample(record: DatasetRecord, target_index: int, expression: str,
               provenance: Provenance = Provenance.GOLD,
               generator_id: Optional[str] = None) -> GroundingSample:
    qbox = quantize(record.objects[target_index].box, record.canvas)
    question, answer = build_rec_pair(expression, qbox)
    return GroundingSample(record, question, answer, TaskKind.REC, qbox, target_index, expression,
                           provenance, generator_id)


def det_caption_samples(records: Iterable[DatasetRecord]) -> List[GroundingSample]:
    return [det_caption_sample(r) for r in records]


def reg_samples(records: Iterable[DatasetRecord]) -> List[GroundingSample]:
    return [reg_sample(r, e.target_index, e.text) for r in records for e in r.expressions]


def rec_samples(records: Iterable[DatasetRecord]) -> List[GroundingSample]:
    return [rec_sample(r, e.target_index, e.text) for r in records for e in r.expressions]


def few_shot(samples: Sequence[GroundingSample], per_class: int) -> List[GroundingSample]:
    """Keep the first ``per_class`` samples for each target shape class."""
    kept: Dict[Optional[str], int] = defaultdict(int)
    out = []
    for sample in samples:
        key = sample.target_shape
        if kept[key] < per_class:
            kept[key] += 1
            out.append(sample)
    return out


# --- Tensor batches ---

@dataclass
class Batch:
    images: torch.Tensor       # B x H x W x 3
    text_ids: torch.Tensor     # B x n_t, PAD-masked instruction
    dec_in: torch.Tensor       # B x T, BOS + answer
    targets: torch.Tensor      # B x T, answer + EOS
    answer_mask: torch.Tensor  # B x T, True on answer tokens
    align_ids: torch.Tensor    # B x n_a, text paired with the image for ITC/ITM
    samples: List[GroundingSample]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class EncodedSample:
    image: np.ndarray
    instruction: List[int]
    answer: List[int]
    sample: GroundingSample

    @property
    def align(self) -> List[int]:
        # the expression lives in the instruction for REC, in the answer otherwise
        return self.instruction if self.sample.task == TaskKind.REC else self.answer


class GroundingDataset(Dataset):
    """Encodes samples lazily; images come from the dataset's cache."""

    def __init__(self, samples: Sequence[GroundingSample], data: LoadedDataset, vocab: Vocabulary,
                 max_seq_len: int):
        self.samples = list(samples)
        self.data = data
        self.vocab = vocab
        self.max_seq_len = max_seq_len
        self.oov_count = 0

    def __len__(self) -> int:
        return len(self.samples)

    def encode(self, sample: GroundingSample) -> EncodedSample:
        instruction = self.vocab.encode(sample.instruction)
        answer = self.vocab.encode(sample.target)
        self.oov_count += len(instruction.oov) + len(answer.oov)
        if len(instruction.ids) > self.max_seq_len or len(answer.ids) + 1 > self.max_seq_len:
            raise ModelInputError(
                f"sample from {sample.record.id} needs {len(answer.ids) + 1} decoder positions; "
                f"max_seq_len is {self.max_seq_len}"
            )
        return EncodedSample(self.data.image(sample.record), instruction.ids, answer.ids, sample)

    def __getitem__(self, index: int) -> EncodedSample:
        return self.encode(self.samples[index])


def collate(items: Sequence[EncodedSample]) -> Batch:
    bos, eos, pad = Vocabulary.bos_id, Vocabulary.eos_id, Vocabulary.pad_id
    width = max(len(item.answer) for item in items) + 1
    dec_in = torch.full((len(items), width), pad, dtype=torch.long)
    targets = torch.full((len(items), width), pad, dtype=torch.long)
    mask = torch.zeros((len(items), width), dtype=torch.bool)
    for i, item in enumerate(items):
        n = len(item.answer)
        dec_in[i, :n + 1] = torch.tensor([bos] + item.answer, dtype=torch.long)
        targets[i, :n + 1] = torch.tensor(item.answer + [eos], dtype=torch.long)
        mask[i, :n + 1] = True
    images = torch.from_numpy(np.stack([item.image for item in items]).astype(np.float32))
    return Batch(
        images=images,
        text_ids=pad_batch([item.instruction for item in items]),
        dec_in=dec_in,
        targets=targets,
        answer_mask=mask,
        align_ids=pad_batch([item.align for item in items]),
        samples=[item.sample for item in items],
    )
