"""RAKE keyword extraction."""

from __future__ import annotations

import re
from dataclasses import dataclass

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

# phrase delimiters besides stop-words
_SPLIT = re.compile(r"[.,;:!?()\[\]{}\"–—/\n]+")
_EDGE = "'\"`-*_"


def normalize_keyword(text: str) -> str:
    """Lowercase, strip punctuation at word edges, collapse whitespace."""
    words = (w.strip(_EDGE + ".,;:!?()[]{}").lower() for w in text.split())
    return " ".join(w for w in words if w)


@dataclass(frozen=True)
class Keyword:
    phrase: str
    score: float
    start: int  # index of the phrase's first word among all words of the text


def candidate_phrases(text: str, stoplist) -> list:
    """Candidate phrases as ``(first_word_index, [words])``.

    Phrases are maximal runs of words with no stop-word or punctuation
    delimiter inside them.
    """
    stop = {s.lower() for s in stoplist}
    phrases = []
    pos = 0
    for piece in _SPLIT.split(text):
        current, start = [], pos
        for raw in piece.split():
            w = normalize_keyword(raw)
            if w:
                if w in stop:
                    if current:
                        phrases.append((start, current))
                    current = []
                else:
                    if not current:
                        start = pos
                    current.append(w)
            pos += 1
        if current:
            phrases.append((start, current))
    return phrases


def rake_keywords(text: str, stoplist=ENGLISH_STOP_WORDS) -> list:
    """Ranked RAKE keywords.

    Word score is degree / frequency, where a word's degree is the summed
    length of the candidate phrases containing it.  Phrase score is the sum
    of its word scores.  Repeated phrases appear once, at their first
    position; ties rank by first occurrence.
    """
    phrases = candidate_phrases(text or "", stoplist)
    freq, degree = {}, {}
    for _, words in phrases:
        for w in words:
            freq[w] = freq.get(w, 0) + 1
            degree[w] = degree.get(w, 0) + len(words)
    seen = {}
    for start, words in phrases:
        key = " ".join(words)
        if key not in seen:
            seen[key] = Keyword(key, sum(degree[w] / freq[w] for w in words), start)
    return sorted(seen.values(), key=lambda k: (-k.score, k.start))


class RakeKeywordExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping texts to their top RAKE phrases.

    Parameters
    ----------
    stoplist : iterable of str or None
        None uses scikit-learn's English stop-word list.
    max_keywords : int or None
    """

    def __init__(self, stoplist=None, max_keywords=None):
        self.stoplist = stoplist
        self.max_keywords = max_keywords

    def fit(self, X=None, y=None):
        return self

    def _stop(self):
        return ENGLISH_STOP_WORDS if self.stoplist is None else self.stoplist

    def transform(self, X):
        out = []
        for text in X:
            kws = [k.phrase for k in rake_keywords(text, self._stop())]
            out.append(kws if self.max_keywords is None else kws[: self.max_keywords])
        return out
