"""
Text I/O
Closed word-level vocabulary, the captioning / REG / REC templates and the
conversion between quantized boxes and their bracketed text form.
"""

import hashlib
import os
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

from ..config.settings import PROMPTS_DIR
from .geometry import QUANT_SCALE, QuantizedBox

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
NEWLINE = "<nl>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PUNCTUATION = ("[", "]", ",", ".", "?", NEWLINE)
TEMPLATE_WORDS = ("find", "the", "in", "region", "of", "what", "is", "where", "image")

_TOKEN_RE = re.compile(r"\n|\d+|[a-z]+|[^\s\da-z]")
_BOX_RE = re.compile(r"\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]")
_NO_SPACE_BEFORE = {",", ".", "?", "]"}
_REGION_MARKER = " in the region of"


class TaskKind(str, Enum):
    """The three training formats."""
    DET_CAPTION = "det_caption"
    REG = "reg"
    REC = "rec"


# --- Templates ---

DEFAULT_TEMPLATES = {
    "det_caption": "find the {object} in the region of {box}.",
    "reg_question": "What is in the region of {box} ?",
    "reg_answer": "{expression} in the region of {box}.",
    "rec_question": "where is {expression} in the image?",
    "rec_answer": "In the region of {box}.",
}


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Load a template from the prompts directory, falling back to the built-in text."""
    path = os.path.join(PROMPTS_DIR, f"{name}.txt")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read().strip()
    except FileNotFoundError:
        print(f"⚠️ Template file not found at {path}, using built-in template")
        return DEFAULT_TEMPLATES[name]


def serialize_box(qbox: QuantizedBox) -> str:
    """Spell a quantized box as ``[x1, y1, x2, y2]``."""
    return "[{}, {}, {}, {}]".format(*qbox.as_tuple())


def build_det_caption(class_name: str, qbox: QuantizedBox) -> str:
    if not class_name or not class_name.strip():
        raise ValueError("class_name must be non-empty")
    return load_template("det_caption").format(object=class_name, box=serialize_box(qbox))


def build_det_captions(items: Iterable[Tuple[str, QuantizedBox]]) -> str:
    """One caption line per object, newline-joined."""
    return "\n".join(build_det_caption(name, qbox) for name, qbox in items)


def reg_question(qbox: QuantizedBox) -> str:
    return load_template("reg_question").format(box=serialize_box(qbox))


def rec_question(expression: str) -> str:
    return load_template("rec_question").format(expression=expression)


def build_reg_pair(qbox: QuantizedBox, expression: str) -> Tuple[str, str]:
    """REG question/answer: box in, expression (with the box echoed) out."""
    answer = load_template("reg_answer").format(expression=expression, box=serialize_box(qbox))
    return reg_question(qbox), answer


def build_rec_pair(expression: str, qbox: QuantizedBox) -> Tuple[str, str]:
    """REC question/answer: expression in, box out."""
    answer = load_template("rec_answer").format(box=serialize_box(qbox))
    return rec_question(expression), answer


def split_reg_answer(text: str) -> Optional[str]:
    """Return the expression part of a REG answer, or None if the template shape is missing."""
    lowered = text.strip().lower()
    cut = lowered.find(_REGION_MARKER)
    if cut <= 0:
        return None
    expression = lowered[:cut].strip()
    return expression or None


# --- Box parsing ---

@dataclass(frozen=True)
class ParsedBox:
    """Box recovered from generated text plus the repairs applied to it."""
    box: QuantizedBox
    clamped: bool = False
    swapped: bool = False

    @property
    def repaired(self) -> bool:
        return self.clamped or self.swapped


def _bounded_int(digits: str) -> int:
    """int() for short digit runs; longer magnitudes map just past the grid on their side."""
    magnitude = digits.lstrip("-").lstrip("0")
    if len(magnitude) > len(str(QUANT_SCALE)):
        return -1 if digits.startswith("-") else QUANT_SCALE + 1
    return int(digits)


def parse_box(text: str) -> Optional[ParsedBox]:
    """
    Extract the first bracketed group of four integers.

    Out-of-range values are clamped to [0, 1000] and reversed corners swapped;
    both repairs are flagged. Returns None when no such group exists.
    """
    match = _BOX_RE.search(text)
    if match is None:
        return None
    raw = [_bounded_int(g) for g in match.groups()]
    values = [min(max(v, 0), QUANT_SCALE) for v in raw]
    clamped = values != raw
    swapped = False
    x1, y1, x2, y2 = values
    if x1 > x2:
        x1, x2 = x2, x1
        swapped = True
    if y1 > y2:
        y1, y2 = y2, y1
        swapped = True
    return ParsedBox(QuantizedBox(x1, y1, x2, y2), clamped=clamped, swapped=swapped)


# --- Tokenizer ---

def split_words(text: str) -> List[str]:
    """Lowercase and split into word, integer, punctuation and newline tokens."""
    return [NEWLINE if w == "\n" else w for w in _TOKEN_RE.findall(text.lower())]


def join_words(words: Sequence[str]) -> str:
    """Inverse of split_words up to whitespace normalisation."""
    out = ""
    prev = None
    for word in words:
        if word == NEWLINE:
            out += "\n"
        elif word in _NO_SPACE_BEFORE or prev == "[" or not out or out.endswith("\n"):
            out += word
        else:
            out += " " + word
        prev = word
    return out


def normalize_text(text: str) -> str:
    """Canonical form: lowercase, single spaces, no space inside brackets or before punctuation."""
    return join_words(split_words(text))


@dataclass(frozen=True)
class Encoded:
    ids: List[int]
    oov: Tuple[str, ...] = ()


class Vocabulary:
    """Bijective token <-> id table; ids 0-3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if any(not t or any(c.isspace() for c in t) for t in tokens):
            raise ValueError("vocabulary tokens must be non-empty and contain no whitespace")
        self._tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    @classmethod
    def build(cls, extra_words: Iterable[str] = ()) -> "Vocabulary":
        """Specials, punctuation, template words, ``extra_words`` and every integer 0..1000."""
        tokens = list(SPECIAL_TOKENS) + list(PUNCTUATION)
        for word in list(TEMPLATE_WORDS) + [w.lower() for w in extra_words]:
            if word not in tokens:
                tokens.append(word)
        tokens.extend(str(n) for n in range(QUANT_SCALE + 1))
        return cls(tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def tokens(self) -> Tuple[str, ...]:
        return self._tokens

    def token_to_id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def id_to_token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, text: str) -> Encoded:
        words = split_words(text)
        ids = [self.token_to_id(w) for w in words]
        oov = tuple(w for w, i in zip(words, ids) if i == self.unk_id and w != UNK)
        return Encoded(ids, oov)

    def tokenize(self, text: str) -> List[int]:
        return self.encode(text).ids

    def detokenize(self, ids: Iterable[int]) -> str:
        """Render ids as text; PAD and BOS are skipped and decoding stops at EOS."""
        words = []
        for idx in ids:
            idx = int(idx)
            if idx == self.eos_id:
                break
            if idx in (self.pad_id, self.bos_id):
                continue
            words.append(self._tokens[idx])
        return join_words(words)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        """One token per line; the line number is the id."""
        with open(path, 'w', encoding='utf-8') as f:
            f.write("\n".join(self._tokens) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, 'r', encoding='utf-8') as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])
