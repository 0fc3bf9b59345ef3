"""Glyph vocabulary and independent per-instance prompt encoding.

Each instance string is encoded on its own to ``[BOS, glyphs..., EOS]`` with
no padding, then all segments are concatenated after a fixed-length null
("utility") global prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx

DEFAULT_ALPHABET = "ABCDEFGHIJKLMNOP"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphVocab:
    alphabet: str = DEFAULT_ALPHABET
    embed_dim: int = 64
    max_str_len: int = 6

    def __post_init__(self):
        if len(self.alphabet) != 16 or len(set(self.alphabet)) != 16:
            raise VocabError("alphabet must hold 16 distinct glyphs")

    @property
    def bos(self) -> int:
        return 16

    @property
    def eos(self) -> int:
        return 17

    @property
    def null(self) -> int:
        return 18

    @property
    def size(self) -> int:
        return 19

    def glyph_id(self, ch: str) -> int:
        idx = self.alphabet.find(ch)
        if idx < 0 or len(ch) != 1:
            raise VocabError(f"glyph {ch!r} not in alphabet {self.alphabet!r}")
        return idx

    def check_string(self, s: str) -> None:
        if len(s) > self.max_str_len:
            raise VocabError(f"string {s!r} longer than {self.max_str_len} glyphs")
        for ch in s:
            self.glyph_id(ch)


def encode_instance_prompt(tgt: str, vocab: GlyphVocab) -> list[int]:
    vocab.check_string(tgt)
    return [vocab.bos] + [vocab.glyph_id(c) for c in tgt] + [vocab.eos]


@dataclass
class PromptBundle:
    token_ids: list[int]
    global_len: int
    inst_lens: list[int]
    # position of each token inside its own segment
    positions: list[int]
    # segment of each token: 0 = utility prompt, n = instance n
    segment_ids: list[int] = field(default_factory=list)
    embeddings: nx.Tensor | None = None
    _bounds: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._bounds = list(np.cumsum([0, self.global_len] + list(self.inst_lens)))
        if self._bounds[-1] != len(self.token_ids):
            raise ValueError("segment lengths do not add up to the token count")

    @property
    def total_len(self) -> int:
        return len(self.token_ids)

    @property
    def num_instances(self) -> int:
        return len(self.inst_lens)

    def segment_range(self, k: int) -> range:
        """Token range of segment ``k``: 0 is the global prompt, 1..N instances."""
        return range(self._bounds[k], self._bounds[k + 1])

    def segment(self, k: int) -> np.ndarray:
        if self.embeddings is None:
            raise ValueError("bundle has no embeddings")
        r = self.segment_range(k)
        return self.embeddings.data[r.start:r.stop]


def assemble(
    global_len: int,
    instance_strings: Sequence[str],
    vocab: GlyphVocab,
    token_table: nx.Tensor | None = None,
    pad_to: int | None = None,
) -> PromptBundle:
    """Build the conditioning sequence: utility prompt, then every instance.

    With ``token_table`` (a [vocab.size × embed_dim] tensor) the segments are
    looked up one at a time and concatenated, so an instance's embeddings
    never depend on another instance's string. ``pad_to`` pads every instance
    with NULL ids to a fixed length; it exists only for cost comparisons
    against fixed-length encoding.
    """
    if global_len < 1:
        raise ValueError("utility prompt needs at least one token")
    segments = [[vocab.null] * global_len]
    for s in instance_strings:
        ids = encode_instance_prompt(s, vocab)
        if pad_to is not None:
            if len(ids) > pad_to:
                raise VocabError(f"{s!r} does not fit in {pad_to} tokens")
            ids = ids + [vocab.null] * (pad_to - len(ids))
        segments.append(ids)
    token_ids = [i for seg in segments for i in seg]
    positions = [p for seg in segments for p in range(len(seg))]
    segment_ids = [k for k, seg in enumerate(segments) for _ in seg]
    embeddings = None
    if token_table is not None:
        if token_table.shape[0] != vocab.size:
            raise ValueError("token table rows must match the vocabulary size")
        embeddings = nx.concat_rows([nx.take_rows(token_table, seg) for seg in segments])
    return PromptBundle(
        token_ids=token_ids,
        global_len=global_len,
        inst_lens=[len(seg) for seg in segments[1:]],
        positions=positions,
        segment_ids=segment_ids,
        embeddings=embeddings,
    )
