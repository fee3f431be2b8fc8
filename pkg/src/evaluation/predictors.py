"""
Grounding Predictors
REC (locate) and REG (describe) answerers: the trained model pair, or an
oracle that reads the scene annotations.
"""

from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence

import numpy as np

from ..config.schema import BeamConfig
from ..core.decode import beam_search, greedy_decode_batch
from ..core.errors import ExpressionParseError, SceneGenerationError
from ..core.geometry import QuantizedBox, quantize
from ..core.model import GroundingModel
from ..core.textio import Vocabulary, build_rec_pair, build_reg_pair, rec_question, reg_question
from ..data.records import DatasetRecord
from ..data.scenegen import generate_expression, match_expression


@dataclass(frozen=True)
class LocateRequest:
    record: DatasetRecord
    image: np.ndarray
    expression: str
    target_index: Optional[int] = None


@dataclass(frozen=True)
class DescribeRequest:
    record: DatasetRecord
    image: np.ndarray
    box: QuantizedBox


class GroundingPredictor(Protocol):
    """Answers REC and REG questions as generated text."""

    def locate(self, requests: Sequence[LocateRequest]) -> List[str]:
        ...

    def describe(self, requests: Sequence[DescribeRequest]) -> List[str]:
        ...


class ModelPredictor:
    """
    Decodes with a comprehender (REC) and a generator (REG) model.

    After the activation stage both are the same network. Greedy batched
    decoding is used when the beam width is 1.
    """

    def __init__(self, comprehender: GroundingModel, generator: GroundingModel,
                 vocab: Vocabulary, beam: BeamConfig, batch_size: int = 32):
        self.comprehender = comprehender.eval()
        self.generator = generator.eval()
        self.vocab = vocab
        self.beam = beam
        self.batch_size = batch_size

    def _answer(self, model: GroundingModel, images: Sequence[np.ndarray], questions: Sequence[str]) -> List[str]:
        prompts = [self.vocab.tokenize(q) for q in questions]
        if self.beam.beam_width == 1:
            answers: List[str] = []
            for start in range(0, len(prompts), self.batch_size):
                chunk = slice(start, start + self.batch_size)
                ids = greedy_decode_batch(model, np.stack(images[chunk]), prompts[chunk],
                                          self.beam.max_new_tokens, self.beam.eos_id)
                answers.extend(self.vocab.detokenize(seq) for seq in ids)
            return answers
        return [
            self.vocab.detokenize(beam_search(model, image, prompt, self.beam)[0].tokens)
            for image, prompt in zip(images, prompts)
        ]

    def locate(self, requests: Sequence[LocateRequest]) -> List[str]:
        return self._answer(self.comprehender, [r.image for r in requests],
                            [rec_question(r.expression) for r in requests])

    def describe(self, requests: Sequence[DescribeRequest]) -> List[str]:
        return self._answer(self.generator, [r.image for r in requests],
                            [reg_question(r.box) for r in requests])


class OraclePredictor:
    """Ground-truth answers from the scene annotations (harness self-test)."""

    def locate(self, requests: Sequence[LocateRequest]) -> List[str]:
        answers = []
        for req in requests:
            try:
                matches = match_expression(req.record.scene(), req.expression)
            except ExpressionParseError:
                matches = set()
            if len(matches) != 1:
                answers.append("")
                continue
            (index,) = matches
            qbox = quantize(req.record.objects[index].box, req.record.canvas)
            answers.append(build_rec_pair(req.expression, qbox)[1])
        return answers

    def describe(self, requests: Sequence[DescribeRequest]) -> List[str]:
        answers = []
        for req in requests:
            index = _object_at(req.record, req.box)
            if index is None:
                answers.append("")
                continue
            try:
                expression = generate_expression(req.record.scene(), index).text
            except SceneGenerationError:
                answers.append("")
                continue
            answers.append(build_reg_pair(req.box, expression)[1])
        return answers


def _object_at(record: DatasetRecord, qbox: QuantizedBox) -> Optional[int]:
    """Index of the object whose quantized box is ``qbox``."""
    for i, obj in enumerate(record.objects):
        if quantize(obj.box, record.canvas) == qbox:
            return i
    return None
