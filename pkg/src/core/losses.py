"""
Training Objectives
Answer-masked language modelling, the ITC/ITG/ITM alignment terms, the
cycle-consistency terms and the weighted full criterion.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .errors import LossInputError
from .geometry import QUANT_SCALE, QuantizedBox

CYCLE_BOX_PENALTY = float(QUANT_SCALE)
TERMS = ("lm", "itc", "itg", "itm", "cyc_box", "cyc_text")

Number = Union[float, torch.Tensor]


def lm_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, answer_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over the positions flagged in ``answer_mask``."""
    if logits.dim() != 3 or logits.shape[:2] != targets.shape or targets.shape != answer_mask.shape:
        raise LossInputError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)} and "
            f"mask {tuple(answer_mask.shape)} do not agree"
        )
    mask = answer_mask.bool()
    if not mask.any():
        raise LossInputError("answer mask selects no positions")
    return F.cross_entropy(logits[mask], targets[mask])


def itg_loss(logits: torch.Tensor, targets: torch.Tensor, answer_mask: torch.Tensor) -> torch.Tensor:
    """Image-grounded generation: the LM objective over REG answers, reported on its own."""
    return lm_cross_entropy(logits, targets, answer_mask)


def itc_loss(image_embeds: torch.Tensor, text_embeds: torch.Tensor, temperature: Number) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch negatives; row i of each side forms the positive pair."""
    if image_embeds.dim() != 2 or image_embeds.shape != text_embeds.shape:
        raise LossInputError(
            f"embedding shapes differ: {tuple(image_embeds.shape)} vs {tuple(text_embeds.shape)}"
        )
    n = image_embeds.shape[0]
    if n == 0:
        raise LossInputError("contrastive loss needs at least one pair")
    logits = image_embeds @ text_embeds.t() / temperature
    labels = torch.arange(n, device=logits.device)
    return (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels)) / 2


def itm_loss(match_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Two-way matching cross-entropy; label 1 means the pair belongs together."""
    if match_logits.dim() != 2 or match_logits.shape[1] != 2 or match_logits.shape[0] != labels.shape[0]:
        raise LossInputError(f"expected n x 2 logits for {labels.shape[0]} labels, got {tuple(match_logits.shape)}")
    return F.cross_entropy(match_logits, labels.long())


def shuffled_negatives(n: int, device: Optional[torch.device] = None) -> torch.Tensor:
    """Index pairing every example with a different one (roll by one); identity when n == 1."""
    return torch.roll(torch.arange(n, device=device), shifts=1)


# --- Cycle consistency ---

def token_edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance over token sequences."""
    previous = list(range(len(b) + 1))
    for i, token_a in enumerate(a, 1):
        current = [i]
        for j, token_b in enumerate(b, 1):
            current.append(min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (token_a != token_b),
            ))
        previous = current
    return previous[-1]


def normalized_edit_distance(a: Sequence[int], b: Sequence[int]) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return token_edit_distance(a, b) / longest


def box_l1(x: QuantizedBox, x_rec: QuantizedBox) -> float:
    """Mean absolute difference of the four quantized coordinates."""
    return sum(abs(p - q) for p, q in zip(x.as_tuple(), x_rec.as_tuple())) / 4


@dataclass(frozen=True)
class CycleTerms:
    box: float
    text: float
    box_unparsed: bool = False


def cycle_consistency(x: QuantizedBox, x_rec: Optional[QuantizedBox],
                      y: Sequence[int], y_rec: Sequence[int]) -> CycleTerms:
    """
    Box term ||F(G(x)) - x|| as L1/4 and text term as normalised token edit
    distance between y and G(F(y)). An unparseable reconstruction costs the
    maximum box penalty and is flagged.
    """
    if x_rec is None:
        box_term, unparsed = CYCLE_BOX_PENALTY, True
    else:
        box_term, unparsed = box_l1(x, x_rec), False
    return CycleTerms(box_term, normalized_edit_distance(y, y_rec), unparsed)


# --- Full criterion ---

@dataclass
class LossBreakdown:
    """Per-term values (floats) plus the differentiable objective."""
    lm: float = 0.0
    itc: float = 0.0
    itg: float = 0.0
    itm: float = 0.0
    cyc_box: float = 0.0
    cyc_text: float = 0.0
    total: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    @property
    def cyc(self) -> float:
        return self.cyc_box + self.cyc_text

    def row(self, step: int) -> Dict[str, float]:
        """One train_log.csv row."""
        values = {name: getattr(self, name) for name in TERMS}
        return {"step": step, **values, "total": self.total}


def _value(term: Number) -> float:
    return float(term.detach()) if isinstance(term, torch.Tensor) else float(term)


def full_criterion(weights: Mapping[str, float], lm: Optional[Number] = None, itc: Optional[Number] = None,
                   itg: Optional[Number] = None, itm: Optional[Number] = None,
                   cyc_box: Optional[Number] = None, cyc_text: Optional[Number] = None) -> LossBreakdown:
    """
    Weighted sum of the present terms; ``weights`` has keys lm, itc, itg, itm, cyc.

    Terms that are absent or weighted 0 are skipped entirely, so an objective
    with only ``lm`` active is exactly the plain LM loss. The cycle terms are
    values computed from decoded text and carry no gradient.
    """
    weights = dict(weights)
    for name, value in weights.items():
        if value < 0:
            raise LossInputError(f"loss weight {name} must be non-negative, got {value}")
    provided = {"lm": lm, "itc": itc, "itg": itg, "itm": itm}
    objective: Optional[torch.Tensor] = None
    constant = 0.0
    values = {}
    for name, term in provided.items():
        if term is None:
            continue
        values[name] = _value(term)
        w = weights.get(name, 1.0)
        if w == 0:
            continue
        scaled = term * w if w != 1.0 else term
        if isinstance(scaled, torch.Tensor):
            objective = scaled if objective is None else objective + scaled
        else:
            constant += float(scaled)

    cyc_weight = weights.get("cyc", 1.0)
    for name, term in (("cyc_box", cyc_box), ("cyc_text", cyc_text)):
        if term is None:
            continue
        values[name] = _value(term)
        if cyc_weight != 0:
            constant += cyc_weight * values[name]

    total = (_value(objective) if objective is not None else 0.0) + constant
    return LossBreakdown(**values, total=total, weights=weights, objective=objective)
