import numpy as np
import pytest

from src.core.geometry import QuantizedBox
from src.core.textio import (
    build_det_caption, build_det_captions, build_rec_pair, build_reg_pair, normalize_text, parse_box,
    rec_question, serialize_box, split_reg_answer,
)

REFERENCE_BOX = QuantizedBox(122, 366, 393, 898)


def test_serialize_box():
    assert serialize_box(REFERENCE_BOX) == "[122, 366, 393, 898]"
    assert serialize_box(QuantizedBox(0, 0, 1000, 1000)) == "[0, 0, 1000, 1000]"


def test_parse_box_examples():
    parsed = parse_box("In the region of [150, 366, 393, 898].")
    assert parsed.box.as_tuple() == (150, 366, 393, 898)
    assert not parsed.repaired
    assert parse_box("[10, 20, 30]") is None
    assert parse_box("no box here") is None


def test_parse_box_clamps_then_swaps():
    parsed = parse_box("[1200, 0, 100, 50]")
    assert parsed.box.as_tuple() == (100, 0, 1000, 50)
    assert parsed.clamped and parsed.swapped and parsed.repaired


def test_parse_box_clamps_very_long_digit_runs():
    parsed = parse_box("In the region of [" + "9" * 5000 + ", -" + "9" * 5000 + ", 10, 0010].")
    assert parsed.box.as_tuple() == (10, 0, 1000, 10)
    assert parsed.clamped and parsed.swapped
    assert parse_box("[00000000012, 3, 40, 50]").box.as_tuple() == (12, 3, 40, 50)
    assert not parse_box("[00000000012, 3, 40, 50]").repaired


def test_serialize_parse_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        x1, x2 = sorted(int(v) for v in rng.integers(0, 1001, size=2))
        y1, y2 = sorted(int(v) for v in rng.integers(0, 1001, size=2))
        qbox = QuantizedBox(x1, y1, x2, y2)
        assert parse_box(serialize_box(qbox)).box == qbox


def test_det_caption_template():
    caption = build_det_caption("red circle", QuantizedBox(10, 20, 30, 40))
    assert caption == "find the red circle in the region of [10, 20, 30, 40]."
    assert parse_box(caption).box == QuantizedBox(10, 20, 30, 40)
    with pytest.raises(ValueError):
        build_det_caption(" ", QuantizedBox(10, 20, 30, 40))


def test_det_captions_one_line_per_object():
    items = [("red circle", QuantizedBox(0, 0, 10, 10)), ("blue square", QuantizedBox(20, 20, 40, 40)),
             ("green triangle", QuantizedBox(50, 50, 90, 90))]
    assert len(build_det_captions(items).split("\n")) == 3


def test_reg_pair_matches_reference_text():
    question, answer = build_reg_pair(REFERENCE_BOX, "the left red circle")
    assert question == "What is in the region of [122, 366, 393, 898] ?"
    assert answer == "the left red circle in the region of [122, 366, 393, 898]."
    assert answer.count("[") == 1 and answer.count("]") == 1
    assert split_reg_answer(answer) == "the left red circle"
    assert split_reg_answer("[122, 366, 393, 898].") is None


def test_rec_pair_matches_reference_text():
    question, answer = build_rec_pair("the left red circle", QuantizedBox(150, 366, 393, 898))
    assert question == "where is the left red circle in the image?"
    assert answer == "In the region of [150, 366, 393, 898]."
    assert rec_question("the left red circle") == question


def test_template_round_trip_through_vocabulary(vocab):
    texts = [
        build_det_caption("red circle", REFERENCE_BOX),
        *build_reg_pair(REFERENCE_BOX, "the left red circle"),
        *build_rec_pair("the left red circle", REFERENCE_BOX),
    ]
    for text in texts:
        encoded = vocab.encode(text)
        assert encoded.oov == ()
        assert vocab.detokenize(encoded.ids) == normalize_text(text)


def test_lowercasing(vocab):
    assert vocab.tokenize("Find") == vocab.tokenize("find")


def test_every_coordinate_is_one_token(vocab):
    for n in range(1001):
        ids = vocab.tokenize(str(n))
        assert len(ids) == 1
        assert vocab.detokenize(ids) == str(n)


def test_oov_words_map_to_unk(vocab):
    encoded = vocab.encode("the purple banana")
    assert encoded.oov == ("banana",)
    assert encoded.ids[-1] == vocab.unk_id


def test_vocabulary_save_load(vocab, tmp_path):
    path = tmp_path / "vocab.txt"
    vocab.save(str(path))
    loaded = type(vocab).load(str(path))
    assert loaded.tokens == vocab.tokens
    assert loaded.fingerprint() == vocab.fingerprint()
