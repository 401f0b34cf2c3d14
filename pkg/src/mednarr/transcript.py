"""Timestamped transcripts, lexicon-gated ASR correction and text extraction."""

from __future__ import annotations

import difflib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

from .clients import ClientError

log = logging.getLogger(__name__)

DEICTIC_PHRASES = ("here", "this", "look", "arrow", "pointing", "region", "area")
_EDGE_PUNCT = "\"'.,;:!?()[]{}<>`"
_NUMERIC = re.compile(r"^[+-]?(\d+([.,]\d+)*)(st|nd|rd|th|%|mm|cm|s)?$")
_REFUSAL = re.compile(r"^\s*(i'?m sorry|i cannot|i can't|as an ai)", re.I)


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class Word:
    word: str
    start: float
    end: float


@dataclass(frozen=True)
class TranscriptSegment:
    start: float
    end: float
    text: str
    words: tuple = ()

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"segment ends before it starts: ({self.start}, {self.end})")
        words = tuple(w if isinstance(w, Word) else Word(w["word"], float(w["start"]), float(w["end"]))
                      for w in self.words)
        for w in words:
            if w.start < self.start - 1e-6 or w.end > self.end + 1e-6 or w.end < w.start:
                raise ValueError(f"word {w} lies outside segment ({self.start}, {self.end})")
        object.__setattr__(self, "words", words)

    @property
    def tokens(self) -> list:
        return [w.word for w in self.words] if self.words else self.text.split()

    def to_record(self) -> dict:
        return {"start": self.start, "end": self.end, "text": self.text,
                "words": [{"word": w.word, "start": w.start, "end": w.end} for w in self.words]}

    @classmethod
    def from_record(cls, rec: dict) -> "TranscriptSegment":
        return cls(float(rec["start"]), float(rec["end"]), rec["text"], tuple(rec.get("words", ())))


def load_transcript(path) -> list:
    """Read line-delimited ``{start, end, text, words[]}`` records."""
    segments = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            segments.append(TranscriptSegment.from_record(json.loads(line)))
    return segments


def dump_transcript(segments) -> str:
    return "".join(json.dumps(s.to_record(), sort_keys=True) + "\n" for s in segments)


def normalize_token(token: str) -> str:
    return token.strip(_EDGE_PUNCT).lower()


def count_words(segments) -> int:
    return sum(1 for s in segments for tok in s.tokens if normalize_token(tok))


@dataclass
class Lexicon:
    """Medical vocabulary with term and bigram frequencies.

    File format: one term per line, optionally followed by a tab and an integer
    frequency (default 1).  Multi-word terms add their words to the vocabulary
    and their adjacent word pairs to the bigram table.  ``#`` starts a comment.
    """

    terms: dict = field(default_factory=dict)
    words: set = field(default_factory=set)
    bigrams: dict = field(default_factory=dict)

    @classmethod
    def from_terms(cls, entries) -> "Lexicon":
        lex = cls()
        for entry in entries:
            term, freq = (entry, 1) if isinstance(entry, str) else entry
            lex.add(term, int(freq))
        return lex

    def add(self, term: str, freq: int = 1):
        parts = [normalize_token(p) for p in term.split()]
        parts = [p for p in parts if p]
        if not parts:
            return
        key = " ".join(parts)
        self.terms[key] = self.terms.get(key, 0) + freq
        self.words.update(parts)
        for a, b in zip(parts, parts[1:]):
            self.bigrams[(a, b)] = self.bigrams.get((a, b), 0) + freq

    @classmethod
    def load(cls, path) -> "Lexicon":
        p = Path(path)
        if not p.is_file():
            raise LexiconError(f"lexicon file not found: {path}")
        lex = cls()
        for raw in p.read_text().splitlines():
            line = raw.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            term, _, freq = line.partition("\t")
            try:
                lex.add(term, int(freq) if freq.strip() else 1)
            except ValueError as exc:
                raise LexiconError(f"bad frequency in lexicon line {raw!r}") from exc
        return lex

    def __contains__(self, token: str) -> bool:
        norm = normalize_token(token)
        return norm in self.words or norm in self.terms

    def bigram_heads(self) -> set:
        return {a for a, _ in self.bigrams}


@dataclass(frozen=True)
class Candidate:
    segment: int
    index: int
    token: str
    reason: str  # "oov" | "ngram"


def _allowlisted(norm: str, stopwords) -> bool:
    return not norm or norm in stopwords or bool(_NUMERIC.match(norm))


def detect_errors(segments, lexicon: Optional[Lexicon], stopwords=ENGLISH_STOP_WORDS,
                  ngram_cutoff: int = 2) -> list:
    """Flag likely ASR errors.

    A token is flagged when it is outside the lexicon ("oov"), or when it
    follows a word that starts known medical bigrams but the pair itself is
    rarer than ``ngram_cutoff`` ("ngram").  Stop-words and numbers are never
    flagged.
    """
    if lexicon is None:
        raise LexiconError("error detection needs a lexicon")
    heads = lexicon.bigram_heads()
    found = []
    for si, seg in enumerate(segments):
        prev = None
        for wi, tok in enumerate(seg.tokens):
            norm = normalize_token(tok)
            if _allowlisted(norm, stopwords):
                prev = norm or prev
                continue
            if norm not in lexicon.words:
                found.append(Candidate(si, wi, tok, "oov"))
            elif prev in heads and lexicon.bigrams.get((prev, norm), 0) < ngram_cutoff:
                found.append(Candidate(si, wi, tok, "ngram"))
            prev = norm
    return found


@dataclass(frozen=True)
class CorrectionRecord:
    original: str
    replacement: Optional[str]
    conditioned: bool
    lexicon_verified: bool
    position: tuple  # (segment, word index)
    error: Optional[str] = None

    @property
    def applied(self) -> bool:
        return (self.lexicon_verified and self.replacement is not None
                and normalize_token(self.replacement) != normalize_token(self.original))

    def to_dict(self):
        return {"original": self.original, "replacement": self.replacement, "conditioned": self.conditioned,
                "lexicon_verified": self.lexicon_verified, "position": list(self.position), "error": self.error}


def _swap_core(token: str, new_core: str) -> str:
    core = token.strip(_EDGE_PUNCT)
    if not core:
        return token
    if core[0].isupper() and new_core[:1].islower():
        new_core = new_core[0].upper() + new_core[1:]
    start = token.index(core)
    return token[:start] + new_core + token[start + len(core):]


def _rewrite_text(text: str, tokens: list, replacements: dict) -> str:
    spans = [m.span() for m in re.finditer(r"\S+", text)]
    if len(spans) != len(tokens) or any(text[a:b] != t for (a, b), t in zip(spans, tokens)):
        return " ".join(replacements.get(i, t) for i, t in enumerate(tokens))
    out, last = [], 0
    for i, (a, b) in enumerate(spans):
        out.append(text[last:a])
        out.append(replacements.get(i, text[a:b]))
        last = b
    out.append(text[last:])
    return "".join(out)


def _lm_substitutions(tokens: list, output: str) -> dict:
    """Index -> new token for one-to-one token replacements in the LM output."""
    new = output.split()
    a = [normalize_token(t) for t in tokens]
    b = [normalize_token(t) for t in new]
    subs = {}
    for op, i1, i2, j1, j2 in difflib.SequenceMatcher(a=a, b=b, autojunk=False).get_opcodes():
        if op == "replace" and i2 - i1 == j2 - j1:
            for k in range(i2 - i1):
                subs[i1 + k] = new[j1 + k]
    return subs


def correct(segments, candidates, lm, lexicon: Lexicon):
    """Ask the LM to fix flagged words and keep only lexicon-approved fixes.

    Returns ``(corrected_segments, records)``.  Every candidate yields a
    conditioned record; any other word the LM changes yields an unconditioned
    record.  A replacement is applied only when it is in the lexicon, and only
    one-to-one token swaps are considered, so the word count and all word
    timestamps are preserved.
    """
    by_segment = {}
    for c in candidates:
        by_segment.setdefault(c.segment, []).append(c)
    out_segments, records = [], []
    for si, seg in enumerate(segments):
        flagged = {c.index: c for c in by_segment.get(si, ())}
        tokens = seg.tokens
        if not flagged:
            out_segments.append(seg)
            continue
        text = " ".join(tokens)
        try:
            output = lm.complete("correct", text, {"candidates": [c.token for c in flagged.values()]})
        except ClientError as exc:
            log.warning("correction failed for segment %d: %s", si, exc)
            records.extend(CorrectionRecord(c.token, None, True, False, (si, c.index), str(exc))
                           for c in flagged.values())
            out_segments.append(seg)
            continue
        subs = _lm_substitutions(tokens, output)
        applied = {}
        for idx in sorted(set(flagged) | set(subs)):
            new = subs.get(idx)
            new_core = normalize_token(new) if new is not None else None
            verified = new_core is not None and new_core in lexicon.words | set(lexicon.terms)
            rec = CorrectionRecord(tokens[idx], new_core, idx in flagged, verified, (si, idx))
            records.append(rec)
            if rec.applied:
                applied[idx] = _swap_core(tokens[idx], new.strip(_EDGE_PUNCT))
        if not applied:
            out_segments.append(seg)
            continue
        words = tuple(replace(w, word=applied.get(i, w.word)) for i, w in enumerate(seg.words))
        out_segments.append(replace(seg, text=_rewrite_text(seg.text, tokens, applied), words=words))
    return out_segments, records


@dataclass(frozen=True)
class QualityMetrics:
    precision_conditioned: Optional[float]
    precision_unconditioned: Optional[float]
    asr_error_rate: Optional[float]
    counts: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {"precision_conditioned": self.precision_conditioned,
                "precision_unconditioned": self.precision_unconditioned,
                "asr_error_rate": self.asr_error_rate, **self.counts}


def _ratio(num, den):
    return None if den == 0 else num / den


def quality_metrics(records, total_words: int) -> QualityMetrics:
    """Correction precision and ASR error rate; None where a denominator is zero."""
    cond = [r for r in records if r.conditioned]
    uncond = [r for r in records if not r.conditioned]
    cond_rep = sum(r.applied for r in cond)
    uncond_rep = sum(r.applied for r in uncond)
    counts = {"conditioned_found": len(cond), "conditioned_replaced": cond_rep,
              "unconditioned_found": len(uncond), "unconditioned_replaced": uncond_rep,
              "total_words": total_words}
    return QualityMetrics(_ratio(cond_rep, len(cond)), _ratio(uncond_rep, len(uncond)),
                          _ratio(cond_rep + uncond_rep, total_words), counts)


@dataclass(frozen=True)
class ExtractedText:
    kind: str  # "medical" | "roi"
    text: str
    sources: tuple = ()
    chunk_id: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("medical", "roi"):
            raise ValueError(f"unknown text kind {self.kind!r}")


def has_deictic(text: str, phrases=DEICTIC_PHRASES) -> bool:
    words = {normalize_token(t) for t in text.split()}
    return any((p in words) if " " not in p else (p in text.lower()) for p in phrases)


def _parse_extraction(response: str):
    if not response.strip() or _REFUSAL.match(response):
        return [], []
    try:
        data = json.loads(response)
    except json.JSONDecodeError:
        return [response.strip()], []
    if not isinstance(data, dict):
        raise ValueError(f"extraction response is not an object: {response!r}")
    med = [t for t in data.get("medical", []) if isinstance(t, str) and t.strip()]
    roi = [t for t in data.get("roi", []) if isinstance(t, str) and t.strip()]
    return med, roi


def extract_medical_roi(chunks, lm, deictic=DEICTIC_PHRASES, failures: Optional[list] = None) -> list:
    """Medical and ROI texts per chunk.

    Args:
        chunks: mapping of chunk id to a list of ``(segment_index, segment)``.
        lm: client answering the ``extract`` task with
            ``{"medical": [...], "roi": [...]}``.
        failures: if given, ids of chunks whose extraction failed are appended.

    ROI texts are kept only when one of the chunk's segments contains a deictic
    phrase; those segments become the ROI text's sources.
    """
    out = []
    for chunk_id in sorted(chunks):
        segs = chunks[chunk_id]
        if not segs:
            continue
        text = " ".join(s.text for _, s in segs)
        try:
            med, roi = _parse_extraction(lm.complete("extract", text, {"chunk_id": chunk_id}))
        except (ClientError, ValueError) as exc:
            log.warning("extraction failed for chunk %s: %s", chunk_id, exc)
            if failures is not None:
                failures.append(chunk_id)
            continue
        all_src = tuple(i for i, _ in segs)
        deictic_src = tuple(i for i, s in segs if has_deictic(s.text, deictic))
        out.extend(ExtractedText("medical", t, all_src, chunk_id) for t in med)
        if deictic_src:
            out.extend(ExtractedText("roi", t, deictic_src, chunk_id) for t in roi)
    return out
