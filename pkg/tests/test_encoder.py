import numpy as np
import pytest
from hypothesis import given, strategies as st

from idfm import numerics as nx
from idfm.encoder import GlyphVocab, VocabError, assemble, encode_instance_prompt
from idfm.partition import BoxSpec, build_layout

VOCAB = GlyphVocab()


def table(seed=0):
    return nx.Tensor(np.random.default_rng(seed).normal(size=(VOCAB.size, 8)))


def test_vocab_ids():
    assert VOCAB.size == 19
    assert [VOCAB.glyph_id(c) for c in "AP"] == [0, 15]
    assert (VOCAB.bos, VOCAB.eos, VOCAB.null) == (16, 17, 18)


def test_encode_examples():
    assert encode_instance_prompt("AB", VOCAB) == [16, 0, 1, 17]
    assert encode_instance_prompt("", VOCAB) == [16, 17]


@given(st.text(alphabet="ABCDEFGHIJKLMNOP", max_size=6))
def test_encode_length(s):
    ids = encode_instance_prompt(s, VOCAB)
    assert len(ids) == len(s) + 2
    assert all(0 <= i < VOCAB.size for i in ids)


@pytest.mark.parametrize("bad", ["a", "Z", "ABCDEFG"])
def test_encode_rejects(bad):
    with pytest.raises(VocabError):
        encode_instance_prompt(bad, VOCAB)


def test_assemble_lengths():
    b = assemble(8, ["AB", "C"], VOCAB)
    assert b.total_len == 15 and b.inst_lens == [4, 3]
    assert list(b.segment_range(1)) == list(range(8, 12))


def test_assemble_independence():
    t = table()
    a = assemble(8, ["AB", "C"], VOCAB, token_table=t)
    b = assemble(8, ["AB", "PPPP"], VOCAB, token_table=t)
    assert np.array_equal(a.segment(1), b.segment(1))
    assert np.array_equal(a.segment(0), b.segment(0))


def test_assemble_no_instances():
    b = assemble(8, [], VOCAB, token_table=table())
    assert b.total_len == 8 and b.num_instances == 0
    assert b.token_ids == [VOCAB.null] * 8


def test_segments_match_layout():
    strings = ["AB", "", "PONM"]
    b = assemble(5, strings, VOCAB)
    boxes = [BoxSpec(0, 0, 4, 4)] * 3
    lay = build_layout(5, b.inst_lens, boxes, 4, 2, 2)
    assert b.segment_range(0) == lay.t_g
    for n in range(3):
        assert b.segment_range(n + 1) == lay.t_inst[n]


def test_assemble_pad_to():
    b = assemble(2, ["A", "ABC"], VOCAB, pad_to=6)
    assert b.inst_lens == [6, 6]
    with pytest.raises(VocabError):
        assemble(2, ["ABCDEF"], VOCAB, pad_to=6)
