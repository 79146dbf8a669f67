"""Corpus file formats: CoNLL-style token/label files and JSONL predictions.

CoNLL files hold one ``token<TAB>label`` pair per line with a blank line
between sentences. A ``# id: <string>`` comment immediately before a sentence
sets its id; otherwise ids are the 0-based sentence position, as a string.

Prediction files are JSON Lines, one ``{"sentence_id": ..., "labels": [...]}``
object per sentence.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from lpwp.errors import DataError
from lpwp.tagging import LabeledSentence

_ID_COMMENT = "# id:"


def parse_conll(text: str) -> list[LabeledSentence]:
    sentences: list[LabeledSentence] = []
    seen_ids: set[str] = set()
    pending_id: str | None = None
    tokens: list[str] = []
    labels: list[str] = []

    def flush():
        nonlocal pending_id, tokens, labels
        if not tokens:
            pending_id = None
            return
        sid = pending_id if pending_id is not None else str(len(sentences))
        if sid in seen_ids:
            raise DataError(f"duplicate sentence id {sid!r} in corpus")
        seen_ids.add(sid)
        sentences.append(LabeledSentence(sid, tuple(tokens), tuple(labels)))
        pending_id, tokens, labels = None, [], []

    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            flush()
            continue
        if line.startswith(_ID_COMMENT):
            if tokens:
                raise DataError(f"line {lineno}: id comment in the middle of a sentence")
            pending_id = line[len(_ID_COMMENT):].strip()
            if not pending_id:
                raise DataError(f"line {lineno}: empty sentence id")
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(
                f"line {lineno}: expected 'token<TAB>label', got {line!r}"
            )
        tokens.append(fields[0])
        labels.append(fields[1])
    flush()
    return sentences


def read_conll(path: str | Path) -> list[LabeledSentence]:
    return parse_conll(Path(path).read_text(encoding="utf-8"))


def format_conll(corpus: Iterable[LabeledSentence]) -> str:
    blocks = []
    for sent in corpus:
        lines = [f"{_ID_COMMENT} {sent.sentence_id}"]
        lines.extend(f"{tok}\t{label}" for tok, label in zip(sent.tokens, sent.labels))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def write_conll(path: str | Path, corpus: Iterable[LabeledSentence]) -> None:
    Path(path).write_text(format_conll(corpus), encoding="utf-8")


def read_predictions(path: str | Path) -> dict[str, list[str]]:
    """Load a JSONL prediction file as {sentence_id: labels}."""
    predictions: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}, line {lineno}: invalid JSON ({exc})") from exc
        if not isinstance(record, dict) or "sentence_id" not in record or "labels" not in record:
            raise DataError(f"{path}, line {lineno}: expected sentence_id and labels keys")
        sid = str(record["sentence_id"])
        labels = record["labels"]
        if sid in predictions:
            raise DataError(f"{path}, line {lineno}: duplicate sentence id {sid!r}")
        if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
            raise DataError(f"{path}, line {lineno}: labels must be a list of strings")
        predictions[sid] = labels
    return predictions


def write_predictions(path: str | Path, predictions: Mapping[str, Sequence[str]]) -> None:
    lines = [
        json.dumps({"sentence_id": sid, "labels": list(labels)}, ensure_ascii=False)
        for sid, labels in predictions.items()
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def predictions_to_corpus(
    reference: Sequence[LabeledSentence], predictions: Mapping[str, Sequence[str]]
) -> list[LabeledSentence]:
    """Attach predicted labels to the tokens of a reference corpus."""
    corpus = []
    for sent in reference:
        if sent.sentence_id not in predictions:
            raise DataError(f"no prediction for sentence {sent.sentence_id!r}")
        corpus.append(
            LabeledSentence(sent.sentence_id, sent.tokens, tuple(predictions[sent.sentence_id]))
        )
    return corpus
