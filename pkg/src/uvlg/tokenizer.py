"""Word-level tokenizer with the reserved special-token blocks.

Id layout (contiguous, in this order)::

    0 <pad>   1 <s>   2 </s>   3 <unk>   4 <mask>
    5 .. 5+T-1          <text_1> .. <text_T>     (T = 100 by default)
    5+T .. 5+T+n-1      <vis_1> .. <vis_n>
    5+T+n ..            corpus words, most frequent first

Vocab file: UTF-8, header lines start with ``#`` and record the reserved
ranges; every other line is one token and the i-th token line has id i.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

PAD, BOS, EOS, UNK, MASK = "<pad>", "<s>", "</s>", "<unk>", "<mask>"
CONTROL = (PAD, BOS, EOS, UNK, MASK)
NUM_TEXT_SENTINELS = 100

_TOKEN_RE = re.compile(r"</?[a-z_0-9]+>|\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,:;?!)]}")
_NO_SPACE_AFTER = set("([{")


def text_sentinel(k: int) -> str:
    return f"<text_{k}>"


def visual_sentinel(k: int) -> str:
    return f"<vis_{k}>"


def split_words(text: str, lowercase: bool = True, specials=None) -> list:
    """Split on whitespace and punctuation; known special tokens stay whole."""
    out = []
    for tok in _TOKEN_RE.findall(text):
        if tok.startswith("<") and len(tok) > 1:
            if specials is None or tok in specials:
                out.append(tok)
                continue
            # not a special token: treat the brackets as punctuation
            out.append("<")
            out.extend(split_words(tok[1:-1], lowercase, specials=()))
            out.append(">")
            continue
        out.append(tok.lower() if lowercase else tok)
    return out


def join_words(tokens) -> str:
    """Inverse of :func:`split_words` up to whitespace normalization."""
    parts = []
    glue_next = False
    for tok in tokens:
        if not parts:
            parts.append(tok)
        elif tok in _NO_SPACE_BEFORE or tok == "'" or glue_next:
            parts.append(tok)
        else:
            parts.append(" " + tok)
        glue_next = tok == "'" or tok in _NO_SPACE_AFTER
    return "".join(parts)


def normalize(text: str) -> str:
    """Lowercase and re-space exactly as an encode/decode round trip would."""
    return join_words(split_words(text))


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    n_text_sentinels: int
    n_visual_sentinels: int

    def __post_init__(self):
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens are not unique")
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_specials", frozenset(self.tokens[: self.num_reserved]))

    # reserved layout -----------------------------------------------------
    @property
    def num_reserved(self) -> int:
        return len(CONTROL) + self.n_text_sentinels + self.n_visual_sentinels

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def text_sentinel_range(self) -> range:
        start = len(CONTROL)
        return range(start, start + self.n_text_sentinels)

    @property
    def visual_sentinel_range(self) -> range:
        start = len(CONTROL) + self.n_text_sentinels
        return range(start, start + self.n_visual_sentinels)

    def visual_id(self, k: int) -> int:
        if not 1 <= k <= self.n_visual_sentinels:
            raise IndexError(f"region id {k} outside 1..{self.n_visual_sentinels}")
        return self.visual_sentinel_range.start + k - 1

    def region_of(self, token_id: int):
        """Region number for a visual-sentinel id, else None."""
        r = self.visual_sentinel_range
        return token_id - r.start + 1 if token_id in r else None

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok) -> bool:
        return tok in self._index

    def id(self, tok: str) -> int:
        return self._index.get(tok, self.unk_id)

    # text <-> ids --------------------------------------------------------
    def tokenize(self, text: str) -> list:
        return split_words(text, lowercase=True, specials=self._specials)

    def encode(self, text: str) -> list:
        return [self._index.get(t, self.unk_id) for t in self.tokenize(text)]

    def decode(self, ids, skip_control: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i == self.eos_id and skip_control:
                break
            if skip_control and i in (self.pad_id, self.bos_id):
                continue
            toks.append(self.tokens[i])
        return join_words(toks)

    # persistence ---------------------------------------------------------
    def to_text(self) -> str:
        ts, vs = self.text_sentinel_range, self.visual_sentinel_range
        header = [
            "# uvlg vocab v1",
            f"# size {len(self)}",
            f"# control 0-{len(CONTROL) - 1} " + " ".join(CONTROL),
            f"# text_sentinels {ts.start}-{ts.stop - 1}",
            f"# visual_sentinels {vs.start}-{vs.stop - 1}",
            f"# words {vs.stop}-{len(self) - 1}",
        ]
        return "\n".join(header + list(self.tokens)) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        tokens = [ln for ln in lines if not ln.startswith("#")]
        n_text = sum(1 for t in tokens if re.fullmatch(r"<text_\d+>", t))
        n_vis = sum(1 for t in tokens if re.fullmatch(r"<vis_\d+>", t))
        vocab = cls(tuple(tokens), n_text, n_vis)
        expected = reserved_tokens(n_text, n_vis)
        if tuple(tokens[: len(expected)]) != expected:
            raise ValueError("vocab file does not start with the reserved token block")
        return vocab

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def reserved_tokens(n_text: int, n_visual: int) -> tuple:
    return (CONTROL + tuple(text_sentinel(k) for k in range(1, n_text + 1))
            + tuple(visual_sentinel(k) for k in range(1, n_visual + 1)))


def build_vocab(corpus, target_size: int, n_regions: int = 36,
                n_text_sentinels: int = NUM_TEXT_SENTINELS) -> Vocab:
    """Reserved blocks followed by corpus words ranked by frequency.

    Ties are broken by first appearance in ``corpus``. The result has at most
    ``target_size`` entries (fewer if the corpus runs out of distinct words).
    """
    reserved = reserved_tokens(n_text_sentinels, n_regions)
    if target_size <= len(reserved):
        raise ValueError(f"target_size {target_size} must exceed the {len(reserved)} reserved tokens")
    counts = Counter()
    first = {}
    any_text = False
    specials = frozenset(reserved)
    for line in corpus:
        any_text = True
        for tok in split_words(line, lowercase=True, specials=specials):
            if tok in specials:
                continue
            counts[tok] += 1
            first.setdefault(tok, len(first))
    if not any_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted(counts, key=lambda w: (-counts[w], first[w]))
    words = words[: target_size - len(reserved)]
    return Vocab(reserved + tuple(words), n_text_sentinels, n_regions)
