"""Tokenization, stemming, and the closed caption vocabulary.

The tokenizer is deliberately plain: lowercase, split on whitespace, strip
punctuation from token edges.  Every consumer (metrics, statistics, model
vocabulary) goes through it so token counts always agree.

The stemmer is the classic Porter algorithm, hand-implemented so stem
matching needs no external resources and behaves identically everywhere.
"""

from __future__ import annotations

import string

from .errors import ContractError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_STRIP = string.punctuation


def tokenize(text: str) -> list[str]:
    out = []
    for chunk in text.lower().split():
        tok = chunk.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


# ---------------------------------------------------------------------------
# Porter stemmer


_VOWELS = "aeiou"


def _cons(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _cons(word, i - 1)
    return True


def _measure(stem: str) -> int:
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        if _cons(stem, i):
            if prev_vowel:
                m += 1
            prev_vowel = False
        else:
            prev_vowel = True
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _cons(stem, i) for i in range(len(stem)))


def _double_cons(word: str) -> bool:
    return (len(word) >= 2 and word[-1] == word[-2] and _cons(word, len(word) - 1))


def _cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    return (_cons(word, len(word) - 3)
            and not _cons(word, len(word) - 2)
            and _cons(word, len(word) - 1)
            and word[-1] not in "wxy")


def _replace(word: str, suffix: str, repl: str, min_m: int) -> str | None:
    if not word.endswith(suffix):
        return None
    stem = word[: len(word) - len(suffix)]
    if _measure(stem) > min_m - 1:
        return stem + repl
    return word


_STEP2 = [("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
          ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
          ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
          ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
          ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble")]

_STEP3 = [("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
          ("ical", "ic"), ("ful", ""), ("ness", "")]

_STEP4 = ["al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
          "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize"]


def porter_stem(word: str) -> str:
    """Porter's 1980 suffix-stripping algorithm for lowercase ascii words."""
    if len(word) <= 2:
        return word
    w = word

    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]

    # step 1b
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        trimmed = None
        if w.endswith("ed") and _has_vowel(w[:-2]):
            trimmed = w[:-2]
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            trimmed = w[:-3]
        if trimmed is not None:
            w = trimmed
            if w.endswith(("at", "bl", "iz")):
                w = w + "e"
            elif _double_cons(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _cvc(w):
                w = w + "e"

    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # step 2
    for suffix, repl in _STEP2:
        if w.endswith(suffix):
            w = _replace(w, suffix, repl, 1)
            break

    # step 3
    for suffix, repl in _STEP3:
        if w.endswith(suffix):
            w = _replace(w, suffix, repl, 1)
            break

    # step 4
    for suffix in _STEP4:
        if w.endswith(suffix):
            stem = w[: len(w) - len(suffix)]
            if _measure(stem) > 1:
                if suffix == "ion" and stem and stem[-1] not in "st":
                    pass
                else:
                    w = stem
            break

    # step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _cvc(stem)):
            w = stem

    # step 5b
    if _measure(w) > 1 and _double_cons(w) and w.endswith("l"):
        w = w[:-1]

    return w


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Token <-> id table with fixed special slots and stable ordering."""

    def __init__(self, tokens: list[str]):
        seen = set(SPECIALS)
        for tok in tokens:
            if tok in seen:
                raise ContractError(f"duplicate or reserved token {tok!r}")
            seen.add(tok)
        self._tokens = list(SPECIALS) + list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        words = sorted({tok for text in texts for tok in tokenize(text)})
        return cls(words)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise ContractError(f"token id {idx} outside vocabulary of {len(self._tokens)}")
        return self._tokens[idx]

    def encode(self, text: str, wrap: bool = True) -> list[int]:
        ids = [self.id_of(tok) for tok in tokenize(text)]
        if wrap:
            return [BOS] + ids + [EOS]
        return ids

    def decode(self, ids) -> list[str]:
        out = []
        for idx in ids:
            idx = int(idx)
            if idx == EOS:
                break
            if idx in (PAD, BOS):
                continue
            out.append(self.token_of(idx))
        return out

    def save(self, path) -> None:
        from pathlib import Path
        Path(path).write_text("".join(t + "\n" for t in self._tokens[len(SPECIALS):]))

    @classmethod
    def load(cls, path) -> "Vocab":
        from pathlib import Path
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])
