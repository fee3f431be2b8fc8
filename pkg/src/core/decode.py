"""
Decoding
Greedy and beam search over anything that yields next-token log-probabilities.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from ..config.schema import BeamConfig
from .model import ForwardState, GroundingModel
from .textio import Vocabulary


class StepModel(Protocol):
    """Incremental next-token distribution over a set of live hypotheses."""

    def reset(self, num_beams: int) -> None:
        ...

    def advance(self, tokens: torch.Tensor, parents: torch.Tensor) -> torch.Tensor:
        """
        Extend hypothesis ``parents[i]`` with ``tokens[i]`` for each row i and
        return the log-probabilities of the next token, shape len(tokens) x V.
        """
        ...


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: Tuple[int, ...]   # generated ids; ends with EOS when finished
    logprob: float
    score: float              # logprob / len ** length_penalty
    finished: bool


def _normalized(logprob: float, length: int, alpha: float) -> float:
    if alpha == 0:
        return logprob
    return logprob / (max(length, 1) ** alpha)


def search_greedy(step_model: StepModel, max_new_tokens: int, bos_id: int, eos_id: int) -> List[int]:
    """Arg-max token per step until EOS (kept) or ``max_new_tokens``."""
    step_model.reset(1)
    token = torch.tensor([bos_id])
    parents = torch.zeros(1, dtype=torch.long)
    out: List[int] = []
    for _ in range(max_new_tokens):
        logprobs = step_model.advance(token, parents)
        next_id = int(torch.argmax(logprobs[0]))
        out.append(next_id)
        if next_id == eos_id:
            break
        token = torch.tensor([next_id])
    return out


def search_beam(step_model: StepModel, cfg: BeamConfig, bos_id: int) -> List[BeamHypothesis]:
    """
    Beam search keeping the ``beam_width`` best partial sequences by raw
    log-probability. A candidate ending in EOS leaves the beam, so the beam
    shrinks until every slot has finished or the token budget is spent.
    Hypotheses come back ranked by length-normalised score, best first.
    """
    width, alpha = cfg.beam_width, cfg.length_penalty
    step_model.reset(width)
    live_tokens: List[Tuple[int, ...]] = [()]
    live_scores = torch.zeros(1, dtype=torch.float64)
    inputs = torch.tensor([bos_id])
    parents = torch.zeros(1, dtype=torch.long)
    finished: List[BeamHypothesis] = []

    for _ in range(cfg.max_new_tokens):
        logprobs = step_model.advance(inputs, parents).double()
        vocab = logprobs.shape[1]
        candidates = (live_scores[:, None] + logprobs).reshape(-1)
        order = torch.sort(candidates, descending=True, stable=True).indices
        slots = width - len(finished)
        next_tokens, next_parents, next_scores = [], [], []
        for flat in order[:slots].tolist():
            score = float(candidates[flat])
            if score == float("-inf"):
                break
            row, token = divmod(flat, vocab)
            sequence = live_tokens[row] + (token,)
            if token == cfg.eos_id:
                finished.append(BeamHypothesis(sequence, score, _normalized(score, len(sequence), alpha), True))
            else:
                next_tokens.append(token)
                next_parents.append(row)
                next_scores.append(score)
        if not next_tokens:
            live_tokens = []
            break
        live_tokens = [live_tokens[p] + (t,) for p, t in zip(next_parents, next_tokens)]
        live_scores = torch.tensor(next_scores, dtype=torch.float64)
        inputs = torch.tensor(next_tokens)
        parents = torch.tensor(next_parents)

    hypotheses = finished + [
        BeamHypothesis(seq, float(s), _normalized(float(s), len(seq), alpha), False)
        for seq, s in zip(live_tokens, live_scores.tolist())
    ]
    hypotheses.sort(key=lambda h: h.score, reverse=True)
    return hypotheses[:width]


class PrefixStepModel:
    """StepModel over a function from the generated prefix to next-token logits."""

    def __init__(self, next_logits: Callable[[Tuple[int, ...]], Sequence[float]]):
        self.next_logits = next_logits
        self._prefixes: List[Tuple[int, ...]] = []

    def reset(self, num_beams: int) -> None:
        self._prefixes = []

    def advance(self, tokens: torch.Tensor, parents: torch.Tensor) -> torch.Tensor:
        if not self._prefixes:
            # first call: every row starts from the empty answer
            self._prefixes = [() for _ in range(len(tokens))]
        else:
            self._prefixes = [self._prefixes[p] + (int(t),) for p, t in zip(parents.tolist(), tokens)]
        logits = torch.tensor([list(self.next_logits(p)) for p in self._prefixes], dtype=torch.float64)
        return torch.log_softmax(logits, dim=-1)


class ModelStepper:
    """StepModel backed by the grounding decoder with a KV cache."""

    def __init__(self, model: GroundingModel, state: ForwardState):
        self.model = model
        self.state = state
        self.cache = model.new_cache()
        self._rows: Optional[ForwardState] = None

    def reset(self, num_beams: int) -> None:
        self.cache = self.model.new_cache()
        self._rows = None

    @torch.no_grad()
    def advance(self, tokens: torch.Tensor, parents: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[0]
        if self.cache.length:
            self.cache.reorder(parents)
        if self._rows is None or self._rows.fused.shape[0] != n:
            self._rows = self.state.repeat(n)
        logits = self.model.decode(self._rows, tokens.view(n, 1), self.cache)[:, -1]
        return torch.log_softmax(logits.float(), dim=-1)


def _as_image_batch(images) -> torch.Tensor:
    tensor = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return tensor.unsqueeze(0) if tensor.dim() == 3 else tensor


def _budget(model: GroundingModel, max_new_tokens: int) -> int:
    return min(max_new_tokens, model.config.max_seq_len)


@torch.no_grad()
def encode_prompt(model: GroundingModel, image, prompt_ids: Sequence[int]) -> ForwardState:
    ids = torch.tensor([list(prompt_ids)], dtype=torch.long).reshape(1, len(prompt_ids))
    return model.encode(_as_image_batch(image), ids)


def greedy_decode(model: GroundingModel, image, prompt_ids: Sequence[int], max_new_tokens: int,
                  eos_id: int = Vocabulary.eos_id) -> List[int]:
    stepper = ModelStepper(model, encode_prompt(model, image, prompt_ids))
    return search_greedy(stepper, _budget(model, max_new_tokens), Vocabulary.bos_id, eos_id)


def beam_search(model: GroundingModel, image, prompt_ids: Sequence[int], cfg: BeamConfig) -> List[BeamHypothesis]:
    stepper = ModelStepper(model, encode_prompt(model, image, prompt_ids))
    budget = cfg.model_copy(update={"max_new_tokens": _budget(model, cfg.max_new_tokens)})
    return search_beam(stepper, budget, Vocabulary.bos_id)


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = Vocabulary.pad_id) -> torch.Tensor:
    """Right-pad id lists into a B x max_len tensor."""
    width = max((len(s) for s in sequences), default=0)
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for i, seq in enumerate(sequences):
        if seq:
            out[i, :len(seq)] = torch.tensor(list(seq), dtype=torch.long)
    return out


@torch.no_grad()
def greedy_decode_batch(model: GroundingModel, images, prompts: Sequence[Sequence[int]], max_new_tokens: int,
                        eos_id: int = Vocabulary.eos_id) -> List[List[int]]:
    """Greedy decoding of many (image, prompt) pairs at once; prompts are PAD-masked."""
    batch = _as_image_batch(images)
    if batch.shape[0] != len(prompts):
        raise ValueError(f"{batch.shape[0]} images for {len(prompts)} prompts")
    if not prompts:
        return []
    state = model.encode(batch, pad_batch(prompts))
    cache = model.new_cache()
    tokens = torch.full((len(prompts), 1), Vocabulary.bos_id, dtype=torch.long)
    outputs: List[List[int]] = [[] for _ in prompts]
    done = torch.zeros(len(prompts), dtype=torch.bool)
    for _ in range(_budget(model, max_new_tokens)):
        next_ids = model.decode(state, tokens, cache)[:, -1].argmax(dim=-1)
        for i in torch.nonzero(~done).flatten().tolist():
            outputs[i].append(int(next_ids[i]))
        done |= next_ids == eos_id
        if bool(done.all()):
            break
        tokens = next_ids.unsqueeze(1)
    return outputs
