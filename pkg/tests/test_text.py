import json
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowspeak.text import (BLANK, PAD, UNK, Phonemizer, PhonemizerConfigError, SubprocessPhonemizer,
                            SymbolSequence, SymbolVocabulary, TextError, decode_symbols,
                            deintersperse_blank, encode_symbols, intersperse_blank, phonemize,
                            text_to_sequence)

DATA = Path(__file__).parent / "data"
STUB = [sys.executable, str(DATA / "stub_phonemizer.py")]


@pytest.fixture
def vocab():
    return SymbolVocabulary.build([list("hello world"), list("abc")])


def test_reserved_ids(vocab):
    assert vocab.symbols[:3] == (PAD, BLANK, UNK)
    assert (vocab.pad_id, vocab.blank_id, vocab.unk_id) == (0, 1, 2)
    assert vocab.content_symbols() == set("helowrdabc ")


def test_build_is_order_independent():
    a = SymbolVocabulary.build([list("xyz"), list("abc")])
    b = SymbolVocabulary.build([list("cba"), list("zyx")])
    assert a == b
    assert a.fingerprint() == b.fingerprint()


def test_vocab_rejects_duplicates_and_pad_blank_clash():
    with pytest.raises(TextError):
        SymbolVocabulary(("a", "a", "b"))
    with pytest.raises(TextError):
        SymbolVocabulary(("a", "b", "c"), pad_id=1, blank_id=1)


def test_vocab_serialization_round_trip(vocab, tmp_path):
    vocab.save(tmp_path / "v.json")
    back = SymbolVocabulary.load(tmp_path / "v.json")
    assert back == vocab
    assert back.fingerprint() == vocab.fingerprint()


def test_unknown_symbols_counted(vocab):
    seq = encode_symbols(list("hxq"), vocab)
    assert seq.unknown_count == 2
    assert seq.ids[1] == vocab.unk_id == seq.ids[2]


def test_intersperse_shape(vocab):
    seq = encode_symbols(list("abc"), vocab)
    out = intersperse_blank(seq, vocab)
    assert len(out) == 2 * len(seq) + 1
    assert out.ids[0::2] == (vocab.blank_id,) * 4
    assert out.ids[1::2] == seq.ids


def test_intersperse_rejects_existing_blank(vocab):
    seq = SymbolSequence((vocab.blank_id, 5))
    with pytest.raises(TextError):
        intersperse_blank(seq, vocab)


def test_deintersperse_rejects_malformed(vocab):
    with pytest.raises(TextError):
        deintersperse_blank(SymbolSequence((1, 5)), vocab)
    with pytest.raises(TextError):
        deintersperse_blank(SymbolSequence((5, 1, 5)), vocab)


def test_empty_inputs_rejected(vocab):
    with pytest.raises(TextError):
        encode_symbols([], vocab)
    with pytest.raises(TextError):
        phonemize("   ")
    with pytest.raises(TextError):
        SymbolSequence(())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(list("helowrdabc ")), min_size=1, max_size=64))
def test_round_trip_property(symbols):
    vocab = SymbolVocabulary.build([list("hello world"), list("abc")])
    seq = encode_symbols(symbols, vocab)
    assert decode_symbols(deintersperse_blank(intersperse_blank(seq, vocab), vocab), vocab) == symbols


def test_fallback_phonemizer_lowercases_characters():
    assert phonemize("Hi There") == list("hi there")


def test_fallback_disabled_without_tool_is_config_error():
    with pytest.raises(PhonemizerConfigError):
        phonemize("hello", fallback=False)


def test_missing_external_tool():
    p = Phonemizer(command="/nonexistent/phonemizer-binary", fallback=False)
    with pytest.raises(PhonemizerConfigError):
        p("hello")
    assert Phonemizer(command="/nonexistent/phonemizer-binary")("Ab") == ["a", "b"]


def test_external_phonemizer_matches_golden_file():
    golden = [json.loads(line) for line in (DATA / "phonemizer_golden.jsonl").read_text("utf-8").splitlines()]
    tool = SubprocessPhonemizer(STUB)
    try:
        for rec in golden:
            assert tool(rec["text"]) == rec["phonemes"]
    finally:
        tool.close()


def test_external_phonemizer_process_dying_is_reported():
    tool = SubprocessPhonemizer([sys.executable, str(DATA / "fail_phonemizer.py")])
    with pytest.raises(PhonemizerConfigError):
        tool("hello")
    tool.close()


def test_text_to_sequence_with_external_tool():
    p = Phonemizer(command=STUB, fallback=False)
    vocab = SymbolVocabulary.build([p("the cat sat")])
    seq = text_to_sequence("the cat sat", vocab, p)
    assert seq.unknown_count == 0
    assert decode_symbols(deintersperse_blank(seq, vocab), vocab) == p("the cat sat")
