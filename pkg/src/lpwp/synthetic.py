"""Seeded synthetic corpora and noisy taggers for ensemble experiments.

The generator plants entity mentions of every type into filler text, so a
corpus has realistic IOB structure; ``corrupt_labels`` then simulates a base
tagger with independent per-token errors.
"""

from __future__ import annotations

import random
from typing import Sequence

from lpwp.tagging import DEFAULT_ENTITY_TYPES, LabeledSentence, label_inventory

_FILLER = (
    "the", "a", "shop", "sells", "and", "buys", "every", "day", "with", "must",
    "be", "total", "of", "for", "each", "需要", "plan", "en", "profit", "makes",
)

_ENTITY_WORDS = {
    "VAR": ("chairs", "tables", "lamps", "rickshaws", "ox", "carts", "stools"),
    "PARAM": ("5", "12", "30", "50", "2.5", "0.75", "8"),
    "LIMIT": ("100", "200", "40", "365", "1000"),
    "CONST_DIR": ("most", "least", "exceed", "minimum", "maximum"),
    "OBJ_DIR": ("maximize", "minimize"),
    "OBJ_NAME": ("profit", "cost", "revenue", "output", "coconuts"),
}


def make_corpus(
    num_sentences: int,
    seed: int = 0,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    id_prefix: str = "syn",
) -> list[LabeledSentence]:
    rng = random.Random(seed)
    corpus = []
    for i in range(num_sentences):
        tokens: list[str] = []
        labels: list[str] = []
        for _ in range(rng.randint(0, 2)):
            tokens.append(rng.choice(_FILLER))
            labels.append("O")
        for _ in range(rng.randint(1, 3)):
            etype = rng.choice(list(entity_types))
            words = _ENTITY_WORDS.get(etype, _FILLER)
            length = rng.randint(1, min(3, len(words)))
            for j in range(length):
                tokens.append(rng.choice(words))
                labels.append(("B-" if j == 0 else "I-") + etype)
            for _ in range(rng.randint(1, 3)):
                tokens.append(rng.choice(_FILLER))
                labels.append("O")
        corpus.append(LabeledSentence(f"{id_prefix}-{i}", tuple(tokens), tuple(labels)))
    return corpus


def corrupt_labels(
    corpus: Sequence[LabeledSentence],
    error_rate: float,
    seed: int,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
) -> dict[str, list[str]]:
    """Simulated tagger: each gold label flips to a uniformly random wrong
    label with probability ``error_rate``. Output rows may violate IOB, as
    real per-token errors would."""
    inventory = label_inventory(entity_types)
    rng = random.Random(seed)
    predictions = {}
    for sent in corpus:
        row = []
        for label in sent.labels:
            if rng.random() < error_rate:
                wrong = [lab for lab in inventory if lab != label]
                row.append(rng.choice(wrong))
            else:
                row.append(label)
        predictions[sent.sentence_id] = row
    return predictions
