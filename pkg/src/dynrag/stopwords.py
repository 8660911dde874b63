"""Pinned English stopword list and the set type used for semantic gating."""
from __future__ import annotations

import string

STOPWORDS_VERSION = "en-v1"

# Classic English function-word list plus merged contraction forms; membership
# tests strip punctuation, so "don't" and "dont" both resolve to the same entry.
_WORDS = """
i me my myself we our ours ourselves you your yours yourself yourselves
he him his himself she her hers herself it its itself they them their theirs
themselves what which who whom this that these those am is are was were be
been being have has had having do does did doing a an the and but if or
because as until while of at by for with about against between into through
during before after above below to from up down in out on off over under
again further then once here there when where why how all any both each few
more most other some such no nor not only own same so than too very s t can
will just don should now d ll m o re ve y ain aren couldn didn doesn hadn
hasn haven isn ma mightn mustn needn shan shouldn wasn weren won wouldn
dont shouldve youre youve youll youd shes thats itll isnt arent wasnt werent
wont cant couldnt didnt doesnt hadnt hasnt havent mightnt mustnt neednt
shant shouldnt wouldnt
""".split()

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def fold_word(word: str) -> str:
    """Case-fold a word and strip every punctuation character."""
    return word.casefold().translate(_PUNCT_TABLE)


class StopwordSet:
    """Immutable, case-insensitive stopword membership with a version tag.

    Words that are empty after punctuation stripping (pure punctuation) are
    treated as stopwords: they carry no retrieval signal.
    """

    def __init__(self, words=_WORDS, version: str = STOPWORDS_VERSION):
        self._words = frozenset(fold_word(w) for w in words)
        self.version = version

    def __contains__(self, word: str) -> bool:
        return self.contains_word(word)

    def __len__(self) -> int:
        return len(self._words)

    def contains_word(self, word: str) -> bool:
        folded = fold_word(word)
        return folded == "" or folded in self._words

    @property
    def words(self) -> frozenset[str]:
        return self._words


DEFAULT_STOPWORDS = StopwordSet()
