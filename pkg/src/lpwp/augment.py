"""Token-level data augmentation for NER training corpora.

Four techniques: label-wise token replacement (LwTR), synonym replacement
(SR), mention replacement (MR) and shuffle within segments (SiS). LwTR, SR
and SiS leave the label sequence untouched; MR swaps whole mentions (with
their own label sequences) so sentence length may change.

Augmentation is only ever applied to training data; evaluation splits stay
as they are.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from lpwp.errors import DataError
from lpwp.tagging import (
    LabeledSentence,
    extract_spans,
    join_label,
    validate_iob,
)

TECHNIQUES = ("lwtr", "sr", "mr", "sis")


@dataclass(frozen=True)
class AugmentConfig:
    technique: str
    replace_probability: float = 0.3
    copies_per_sentence: int = 1
    rng_seed: int = 0
    # word -> synonyms; required for SR, ignored elsewhere
    synonym_table: Mapping[str, Sequence[str]] | None = None
    # SR only: allow multi-word synonyms (continuation tokens get I- labels)
    allow_multiword_synonyms: bool = False

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise DataError(f"unknown augmentation technique {self.technique!r}")
        if not 0.0 <= self.replace_probability <= 1.0:
            raise DataError(f"replace probability {self.replace_probability} not in [0, 1]")
        if self.copies_per_sentence < 1:
            raise DataError("copies_per_sentence must be >= 1")
        if self.technique == "sr" and not self.synonym_table:
            raise DataError("SR augmentation needs a nonempty synonym table")


@dataclass
class LabelLexicon:
    """Replacement sources harvested from a training corpus.

    ``tokens_by_label`` keeps duplicates so that draws are frequency
    weighted; likewise ``mentions_by_type`` (token tuples of full gold
    mentions).
    """

    tokens_by_label: dict[str, list[str]] = field(default_factory=dict)
    mentions_by_type: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)


def build_lexicon(corpus: Sequence[LabeledSentence]) -> LabelLexicon:
    if not corpus:
        raise DataError("cannot build a lexicon from an empty corpus")
    lexicon = LabelLexicon()
    for sent in corpus:
        violations = validate_iob(sent.labels)
        if violations:
            v = violations[0]
            raise DataError(
                f"sentence {sent.sentence_id!r} has invalid IOB at index {v.index}: {v.reason}"
            )
        for token, label in zip(sent.tokens, sent.labels):
            lexicon.tokens_by_label.setdefault(label, []).append(token)
        for span in extract_spans(sent.labels):
            mention = sent.tokens[span.start:span.end]
            lexicon.mentions_by_type.setdefault(span.entity_type, []).append(mention)
    return lexicon


def _derive_rng(config: AugmentConfig, sentence_id: str, copy_index: int) -> random.Random:
    # str seeds hash via sha512 inside random.seed, so this is stable across
    # platforms and runs
    return random.Random(f"{config.rng_seed}|{config.technique}|{sentence_id}|{copy_index}")


def lwtr(
    sentence: LabeledSentence,
    lexicon: LabelLexicon,
    config: AugmentConfig,
    rng: random.Random | None = None,
) -> LabeledSentence:
    """Replace each token, with probability p, by another token of the same label."""
    rng = rng or _derive_rng(config, sentence.sentence_id, 0)
    tokens = list(sentence.tokens)
    for i, label in enumerate(sentence.labels):
        if rng.random() >= config.replace_probability:
            continue
        bucket = lexicon.tokens_by_label.get(label)
        if bucket:
            tokens[i] = rng.choice(bucket)
    return LabeledSentence(sentence.sentence_id, tuple(tokens), sentence.labels)


def sr(
    sentence: LabeledSentence,
    config: AugmentConfig,
    rng: random.Random | None = None,
) -> LabeledSentence:
    """Replace each token, with probability p, by a synonym from the table.

    By default only single-word synonyms are drawn, which keeps the label
    sequence identical. With ``allow_multiword_synonyms`` a multi-word
    synonym expands the sentence; its continuation tokens get I- labels when
    they replace a B- token.
    """
    rng = rng or _derive_rng(config, sentence.sentence_id, 0)
    assert config.synonym_table is not None
    tokens: list[str] = []
    labels: list[str] = []
    for token, label in zip(sentence.tokens, sentence.labels):
        candidates = config.synonym_table.get(token)
        if candidates and not config.allow_multiword_synonyms:
            candidates = [c for c in candidates if " " not in c]
        if not candidates or rng.random() >= config.replace_probability:
            tokens.append(token)
            labels.append(label)
            continue
        replacement = rng.choice(list(candidates)).split()
        tokens.extend(replacement)
        labels.append(label)
        if label == "O":
            labels.extend("O" for _ in replacement[1:])
        else:
            etype = label[2:]
            labels.extend(join_label("I", etype) for _ in replacement[1:])
    return LabeledSentence(sentence.sentence_id, tuple(tokens), tuple(labels))


def mr(
    sentence: LabeledSentence,
    lexicon: LabelLexicon,
    config: AugmentConfig,
    rng: random.Random | None = None,
) -> LabeledSentence:
    """Replace each gold mention, with probability p, by another mention of its type."""
    rng = rng or _derive_rng(config, sentence.sentence_id, 0)
    spans = extract_spans(sentence.labels)
    tokens: list[str] = []
    labels: list[str] = []
    cursor = 0
    for span in spans:
        tokens.extend(sentence.tokens[cursor:span.start])
        labels.extend(sentence.labels[cursor:span.start])
        mention = sentence.tokens[span.start:span.end]
        if rng.random() < config.replace_probability:
            pool = lexicon.mentions_by_type.get(span.entity_type)
            if pool:
                mention = rng.choice(pool)
        tokens.extend(mention)
        labels.append(join_label("B", span.entity_type))
        labels.extend(join_label("I", span.entity_type) for _ in mention[1:])
        cursor = span.end
    tokens.extend(sentence.tokens[cursor:])
    labels.extend(sentence.labels[cursor:])
    return LabeledSentence(sentence.sentence_id, tuple(tokens), tuple(labels))


def _segments(labels: Sequence[str]) -> list[tuple[int, int]]:
    """Maximal same-kind segments: each entity span, and each run of O tokens."""
    segments = []
    spans = extract_spans(labels)
    cursor = 0
    for span in spans:
        if cursor < span.start:
            segments.append((cursor, span.start))
        segments.append((span.start, span.end))
        cursor = span.end
    if cursor < len(labels):
        segments.append((cursor, len(labels)))
    return segments


def sis(
    sentence: LabeledSentence,
    config: AugmentConfig,
    rng: random.Random | None = None,
) -> LabeledSentence:
    """Shuffle the tokens inside each segment, with probability p per segment.

    Only tokens move; the label sequence stays bit-identical.
    """
    rng = rng or _derive_rng(config, sentence.sentence_id, 0)
    tokens = list(sentence.tokens)
    for start, end in _segments(sentence.labels):
        if end - start < 2:
            continue
        if rng.random() < config.replace_probability:
            segment = tokens[start:end]
            rng.shuffle(segment)
            tokens[start:end] = segment
    return LabeledSentence(sentence.sentence_id, tuple(tokens), sentence.labels)


def apply_technique(
    sentence: LabeledSentence,
    lexicon: LabelLexicon,
    config: AugmentConfig,
    rng: random.Random | None = None,
) -> LabeledSentence:
    if config.technique == "lwtr":
        return lwtr(sentence, lexicon, config, rng)
    if config.technique == "sr":
        return sr(sentence, config, rng)
    if config.technique == "mr":
        return mr(sentence, lexicon, config, rng)
    return sis(sentence, config, rng)


def augment_corpus(
    corpus: Sequence[LabeledSentence], configs: Sequence[AugmentConfig]
) -> list[LabeledSentence]:
    """Original corpus plus generated copies, ids ``<orig>#<technique>#<k>``.

    Deterministic given each config's rng_seed: every copy draws from an RNG
    stream derived from (seed, technique, sentence id, copy index), so the
    result does not depend on processing order.
    """
    if not configs:
        return list(corpus)
    lexicon = build_lexicon(corpus)
    augmented = list(corpus)
    copy_counter: dict[tuple[str, str], int] = {}
    for config in configs:
        for sentence in corpus:
            for _ in range(config.copies_per_sentence):
                key = (sentence.sentence_id, config.technique)
                k = copy_counter.get(key, 0) + 1
                copy_counter[key] = k
                rng = _derive_rng(config, sentence.sentence_id, k)
                copy = apply_technique(sentence, lexicon, config, rng)
                new_id = f"{sentence.sentence_id}#{config.technique}#{k}"
                augmented.append(LabeledSentence(new_id, copy.tokens, copy.labels))
    return augmented
