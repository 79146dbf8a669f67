"""IOB2 label handling: validation, repair, span extraction and entity-level F1.

Labels are plain strings ("O", "B-VAR", "I-VAR", ...). Every entity starts
with a B- tag (IOB2); plain IOB is not supported. All functions here are pure.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from lpwp.errors import DataError

# The six entity kinds used for optimization word problems. Extensible: every
# function that needs the inventory takes it as an argument.
DEFAULT_ENTITY_TYPES: tuple[str, ...] = (
    "VAR",
    "PARAM",
    "LIMIT",
    "CONST_DIR",
    "OBJ_DIR",
    "OBJ_NAME",
)

OUTSIDE = "O"


def label_inventory(entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES) -> tuple[str, ...]:
    """Full IOB2 label list: "O" first, then B-/I- pairs in entity-type order."""
    labels = [OUTSIDE]
    for etype in entity_types:
        labels.append(f"B-{etype}")
        labels.append(f"I-{etype}")
    return tuple(labels)


def split_label(label: str) -> tuple[str, str | None]:
    """Split a label string into (prefix, entity_type); "O" -> ("O", None)."""
    if label == OUTSIDE:
        return OUTSIDE, None
    if len(label) > 2 and label[1] == "-" and label[0] in ("B", "I") and label[2:].strip():
        return label[0], label[2:]
    raise DataError(f"malformed IOB label: {label!r}")


def join_label(prefix: str, entity_type: str | None) -> str:
    """Inverse of split_label."""
    if prefix == OUTSIDE:
        if entity_type is not None:
            raise DataError("O label cannot carry an entity type")
        return OUTSIDE
    if prefix not in ("B", "I") or not entity_type:
        raise DataError(f"malformed IOB label parts: ({prefix!r}, {entity_type!r})")
    return f"{prefix}-{entity_type}"


@dataclass(frozen=True)
class LabeledSentence:
    """A tokenized sentence with one IOB label per token."""

    sentence_id: str
    tokens: tuple[str, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.tokens) != len(self.labels):
            raise DataError(
                f"sentence {self.sentence_id!r}: {len(self.tokens)} tokens "
                f"but {len(self.labels)} labels"
            )
        if not self.tokens:
            raise DataError(f"sentence {self.sentence_id!r} is empty")
        for tok in self.tokens:
            if not tok or any(c.isspace() for c in tok):
                raise DataError(
                    f"sentence {self.sentence_id!r}: token {tok!r} is empty or has whitespace"
                )
        for label in self.labels:
            split_label(label)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Half-open token span [start, end) of one entity."""

    start: int
    end: int
    entity_type: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise DataError(f"bad span boundaries ({self.start}, {self.end})")


@dataclass(frozen=True)
class IobViolation:
    index: int
    reason: str


def validate_iob(labels: Sequence[str]) -> list[IobViolation]:
    """Return the IOB2 violations in a label sequence (empty list = valid).

    An I-X is valid only when the previous label is B-X or I-X.
    """
    violations = []
    prev_type = None  # entity type of previous label when it was B-/I-, else None
    for i, label in enumerate(labels):
        prefix, etype = split_label(label)
        if prefix == "I":
            if prev_type is None:
                violations.append(IobViolation(i, f"I-{etype} without a preceding B or I label"))
            elif prev_type != etype:
                violations.append(
                    IobViolation(i, f"I-{etype} follows an entity of type {prev_type}")
                )
        prev_type = etype
    return violations


def repair_iob(labels: Sequence[str]) -> list[str]:
    """Minimal repair: rewrite every violating I-X to B-X, left to right.

    Idempotent; the output always passes validate_iob. Token-level entity
    types are preserved (no span is deleted).
    """
    repaired: list[str] = []
    prev_type = None
    for label in labels:
        prefix, etype = split_label(label)
        if prefix == "I" and prev_type != etype:
            label = join_label("B", etype)
        repaired.append(label)
        prev_type = etype
    return repaired


def extract_spans(labels: Sequence[str]) -> list[EntitySpan]:
    """Entity spans of a valid IOB2 sequence, sorted by start position."""
    violations = validate_iob(labels)
    if violations:
        v = violations[0]
        raise DataError(f"invalid IOB sequence at index {v.index}: {v.reason}")
    spans = []
    start = None
    current = None
    for i, label in enumerate(labels):
        prefix, etype = split_label(label)
        if prefix != "I" and start is not None:
            spans.append(EntitySpan(start, i, current))
            start, current = None, None
        if prefix == "B":
            start, current = i, etype
    if start is not None:
        spans.append(EntitySpan(start, len(labels), current))
    return spans


def labels_from_spans(spans: Iterable[EntitySpan], length: int) -> list[str]:
    """Rebuild the IOB2 label sequence for non-overlapping spans."""
    labels = [OUTSIDE] * length
    for span in spans:
        if span.end > length:
            raise DataError(f"span {span} exceeds sentence length {length}")
        for i in range(span.start, span.end):
            if labels[i] != OUTSIDE:
                raise DataError(f"span {span} overlaps another span")
            labels[i] = join_label("B" if i == span.start else "I", span.entity_type)
    return labels


@dataclass(frozen=True)
class PrfScores:
    precision: float
    recall: float
    f1: float
    gold_count: int = 0
    pred_count: int = 0
    match_count: int = 0


@dataclass(frozen=True)
class F1Report:
    """Entity-level scores: per-type plus micro and macro aggregates.

    ``aggregate`` is whichever of the two the caller asked for.
    """

    per_type: dict[str, PrfScores]
    micro: PrfScores
    macro: PrfScores
    averaging: str = "micro"
    aggregate: PrfScores = field(init=False)

    def __post_init__(self):
        if self.averaging not in ("micro", "macro"):
            raise DataError(f"unknown averaging {self.averaging!r}")
        object.__setattr__(
            self, "aggregate", self.micro if self.averaging == "micro" else self.macro
        )


def _prf(match: int, gold: int, pred: int) -> PrfScores:
    precision = match / pred if pred else 0.0
    recall = match / gold if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PrfScores(precision, recall, f1, gold, pred, match)


def entity_f1(
    gold: Sequence[LabeledSentence],
    pred: Sequence[LabeledSentence],
    averaging: str = "micro",
) -> F1Report:
    """Exact-span-match precision / recall / F1 between two aligned corpora.

    A predicted span counts as a true positive iff its (start, end, type)
    triple matches a gold span of the same sentence. Macro scores average
    over the entity types present in gold.
    """
    gold_by_id = {s.sentence_id: s for s in gold}
    pred_by_id = {s.sentence_id: s for s in pred}
    if len(gold_by_id) != len(gold) or len(pred_by_id) != len(pred):
        raise DataError("duplicate sentence ids in corpus")
    if set(gold_by_id) != set(pred_by_id):
        missing = set(gold_by_id) ^ set(pred_by_id)
        raise DataError(f"gold/pred sentence ids differ, e.g. {sorted(missing)[:3]}")

    match: Counter[str] = Counter()
    gold_counts: Counter[str] = Counter()
    pred_counts: Counter[str] = Counter()
    for sid, gold_sent in gold_by_id.items():
        pred_sent = pred_by_id[sid]
        if len(pred_sent) != len(gold_sent):
            raise DataError(
                f"sentence {sid!r}: gold has {len(gold_sent)} tokens, "
                f"pred has {len(pred_sent)}"
            )
        gold_spans = set(extract_spans(gold_sent.labels))
        pred_spans = set(extract_spans(pred_sent.labels))
        for span in gold_spans:
            gold_counts[span.entity_type] += 1
        for span in pred_spans:
            pred_counts[span.entity_type] += 1
        for span in gold_spans & pred_spans:
            match[span.entity_type] += 1

    types = sorted(set(gold_counts) | set(pred_counts))
    per_type = {t: _prf(match[t], gold_counts[t], pred_counts[t]) for t in types}
    micro = _prf(sum(match.values()), sum(gold_counts.values()), sum(pred_counts.values()))

    gold_types = [t for t in types if gold_counts[t] > 0]
    if gold_types:
        macro = PrfScores(
            precision=sum(per_type[t].precision for t in gold_types) / len(gold_types),
            recall=sum(per_type[t].recall for t in gold_types) / len(gold_types),
            f1=sum(per_type[t].f1 for t in gold_types) / len(gold_types),
            gold_count=sum(gold_counts.values()),
            pred_count=sum(pred_counts.values()),
            match_count=sum(match.values()),
        )
    else:
        macro = _prf(0, 0, sum(pred_counts.values()))
    return F1Report(per_type=per_type, micro=micro, macro=macro, averaging=averaging)
