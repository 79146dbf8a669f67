"""Combining several base sequence labelers into one consensus labeler.

Two strategies: per-token majority voting (fast, but its output can break
the IOB scheme) and a trained stack that one-hot encodes all base
predictions, feeds them through three linear layers and decodes with a CRF
whose forbidden transitions make every output IOB-valid by construction.
"""

from __future__ import annotations

import copy
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from lpwp import crf
from lpwp.errors import DataError
from lpwp.tagging import DEFAULT_ENTITY_TYPES, LabeledSentence, entity_f1, label_inventory

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-sentence predictions of M base models, one label row per model."""

    sentence_id: str
    model_ids: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        if not self.model_ids:
            raise DataError("prediction matrix needs at least one model")
        if len(self.rows) != len(self.model_ids):
            raise DataError(
                f"sentence {self.sentence_id!r}: {len(self.model_ids)} model ids "
                f"but {len(self.rows)} prediction rows"
            )
        lengths = {len(r) for r in self.rows}
        if len(lengths) != 1 or 0 in lengths:
            raise DataError(f"sentence {self.sentence_id!r}: prediction rows differ in length")

    @property
    def length(self) -> int:
        return len(self.rows[0])


@dataclass
class EnsembleDataset:
    """Aligned (gold sentence, prediction matrix) pairs."""

    sentences: list[LabeledSentence]
    matrices: list[PredictionMatrix]

    def __post_init__(self):
        if len(self.sentences) != len(self.matrices):
            raise DataError("dataset sentences and prediction matrices differ in count")
        for sent, pm in zip(self.sentences, self.matrices):
            if sent.sentence_id != pm.sentence_id:
                raise DataError(
                    f"dataset misaligned: sentence {sent.sentence_id!r} "
                    f"paired with matrix {pm.sentence_id!r}"
                )
            if len(sent) != pm.length:
                raise DataError(
                    f"sentence {sent.sentence_id!r}: {len(sent)} tokens but "
                    f"{pm.length} predicted labels"
                )

    def __len__(self) -> int:
        return len(self.sentences)


def build_dataset(
    corpus: Sequence[LabeledSentence],
    predictions: Mapping[str, Mapping[str, Sequence[str]]],
    model_ids: Sequence[str] | None = None,
    impute_missing: bool = False,
) -> EnsembleDataset:
    """Assemble an EnsembleDataset from per-model prediction tables.

    A missing prediction row is an error unless ``impute_missing`` is set,
    in which case an all-O row stands in.
    """
    if model_ids is None:
        model_ids = tuple(sorted(predictions))
    model_ids = tuple(model_ids)
    matrices = []
    for sent in corpus:
        rows = []
        for mid in model_ids:
            labels = predictions[mid].get(sent.sentence_id)
            if labels is None:
                if not impute_missing:
                    raise DataError(
                        f"model {mid!r} has no prediction for sentence {sent.sentence_id!r}"
                    )
                labels = ["O"] * len(sent)
            if len(labels) != len(sent):
                raise DataError(
                    f"model {mid!r}, sentence {sent.sentence_id!r}: "
                    f"{len(labels)} labels for {len(sent)} tokens"
                )
            rows.append(tuple(labels))
        matrices.append(PredictionMatrix(sent.sentence_id, model_ids, tuple(rows)))
    return EnsembleDataset(list(corpus), matrices)


def majority_vote(pm: PredictionMatrix) -> list[str]:
    """Per-position modal label; ties go to the lowest-indexed model's label.

    The result is used as-is, with no IOB repair: a consensus of valid
    sequences can still be invalid (callers may chain repair_iob).
    """
    consensus = []
    for t in range(pm.length):
        column = [row[t] for row in pm.rows]
        counts: dict[str, int] = {}
        for label in column:
            counts[label] = counts.get(label, 0) + 1
        top = max(counts.values())
        tied = {label for label, c in counts.items() if c == top}
        winner = next(label for label in column if label in tied)
        consensus.append(winner)
    return consensus


def one_hot_encode(pm: PredictionMatrix, labels: Sequence[str]) -> np.ndarray:
    """(n, M*L) features: per position, M concatenated one-hot label blocks."""
    index = {label: i for i, label in enumerate(labels)}
    num_labels = len(labels)
    features = np.zeros((pm.length, len(pm.model_ids) * num_labels))
    for m, row in enumerate(pm.rows):
        for t, label in enumerate(row):
            if label not in index:
                raise DataError(
                    f"sentence {pm.sentence_id!r}: label {label!r} from model "
                    f"{pm.model_ids[m]!r} is not in the inventory"
                )
            features[t, m * num_labels + index[label]] = 1.0
    return features


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass(frozen=True)
class EnsembleConfig:
    hidden1: int = 128
    hidden2: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    iob_constraints: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EnsembleCrfModel:
    """One-hot encoder -> three linear layers -> CRF, fully materialized."""

    model_ids: tuple[str, ...]
    labels: tuple[str, ...]
    weights: list[np.ndarray]   # [W1 (M*L, h1), W2 (h1, h2), W3 (h2, L)]
    biases: list[np.ndarray]
    crf_params: crf.CrfParams
    activation: str = "relu"
    config: EnsembleConfig = field(default_factory=EnsembleConfig)

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("the stack has exactly three linear layers")
        expected_in = len(self.model_ids) * len(self.labels)
        if self.weights[0].shape[0] != expected_in:
            raise ValueError(
                f"first layer expects input width {self.weights[0].shape[0]}, "
                f"but M*L = {expected_in}"
            )
        if self.weights[2].shape[1] != len(self.labels):
            raise ValueError("last layer must project to the label count")
        for w, b, w_next in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match its layer")
            if w_next is not None and w_next.shape[0] != w.shape[1]:
                raise ValueError("layer widths are not chain-compatible")

    @classmethod
    def initialize(
        cls,
        model_ids: Sequence[str],
        labels: Sequence[str],
        config: EnsembleConfig,
    ) -> "EnsembleCrfModel":
        rng = np.random.default_rng(config.seed)
        d_in = len(model_ids) * len(labels)
        dims = [d_in, config.hidden1, config.hidden2, len(labels)]
        weights = [_he_uniform(rng, dims[i], dims[i + 1]) for i in range(3)]
        biases = [np.zeros(dims[i + 1]) for i in range(3)]
        params = crf.CrfParams.zeros(labels, iob_constraints=config.iob_constraints)
        return cls(tuple(model_ids), tuple(labels), weights, biases, params, "relu", config)

    def emissions(self, features: np.ndarray) -> np.ndarray:
        h1 = np.maximum(features @ self.weights[0] + self.biases[0], 0.0)
        h2 = np.maximum(h1 @ self.weights[1] + self.biases[1], 0.0)
        return h2 @ self.weights[2] + self.biases[2]

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "ensemble-crf",
            "model_ids": list(self.model_ids),
            "labels": list(self.labels),
            "activation": self.activation,
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
            "crf": self.crf_params.to_dict(),
            "config": self.config.to_dict(),
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleCrfModel":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is not a valid checkpoint: {exc}") from exc
        if payload.get("kind") != "ensemble-crf":
            raise DataError(f"{path} is not an ensemble-crf checkpoint")
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DataError(
                f"{path}: unsupported checkpoint version {payload.get('format_version')!r}"
            )
        return cls(
            model_ids=tuple(payload["model_ids"]),
            labels=tuple(payload["labels"]),
            weights=[np.asarray(layer["weight"], dtype=float) for layer in payload["layers"]],
            biases=[np.asarray(layer["bias"], dtype=float) for layer in payload["layers"]],
            crf_params=crf.CrfParams.from_dict(payload["crf"]),
            activation=payload["activation"],
            config=EnsembleConfig(**payload["config"]),
        )


def ensemble_predict(model: EnsembleCrfModel, pm: PredictionMatrix) -> list[str]:
    """Viterbi-decode the consensus labeling; output is always IOB-valid."""
    if pm.model_ids != model.model_ids:
        raise DataError(
            f"prediction matrix stacks models {pm.model_ids}, but the checkpoint "
            f"was trained on {model.model_ids} (order matters)"
        )
    features = one_hot_encode(pm, model.labels)
    emissions = model.emissions(features)
    path, _ = crf.viterbi(model.crf_params.potentials(emissions))
    return [model.labels[i] for i in path]


def predict_batch(model: EnsembleCrfModel, label_indices: np.ndarray) -> np.ndarray:
    """Decode many equal-length prediction matrices at once.

    ``label_indices`` has shape (B, M, n) with entries indexing the model's
    label inventory. Returns (B, n) decoded label indices, identical to
    running ensemble_predict on each matrix.
    """
    batch, num_models, length = label_indices.shape
    if num_models != len(model.model_ids):
        raise DataError(f"expected {len(model.model_ids)} model rows, got {num_models}")
    num_labels = len(model.labels)
    features = np.zeros((batch, length, num_models * num_labels))
    b_idx = np.arange(batch)[:, None]
    t_idx = np.arange(length)[None, :]
    for m in range(num_models):
        features[b_idx, t_idx, m * num_labels + label_indices[:, m, :]] = 1.0
    emissions = model.emissions(features.reshape(batch * length, -1)).reshape(
        batch, length, num_labels
    )

    params = model.crf_params
    delta = params.start[None, :] + emissions[:, 0]
    backpointers = np.zeros((batch, length, num_labels), dtype=np.int16)
    for t in range(1, length):
        scores = delta[:, :, None] + params.transitions[None, :, :]
        backpointers[:, t] = np.argmax(scores, axis=1)
        delta = emissions[:, t] + np.max(scores, axis=1)
    final = delta + params.stop[None, :]
    best = np.argmax(final, axis=1)
    if not np.isfinite(final[np.arange(batch), best]).all():
        raise crf.InfeasiblePathError("no label path has finite score")
    paths = np.zeros((batch, length), dtype=np.int16)
    paths[:, length - 1] = best
    rows = np.arange(batch)
    for t in range(length - 1, 0, -1):
        paths[:, t - 1] = backpointers[rows, t, paths[:, t]]
    return paths


def predict_corpus(
    model: EnsembleCrfModel, matrices: Sequence[PredictionMatrix]
) -> dict[str, list[str]]:
    return {pm.sentence_id: ensemble_predict(model, pm) for pm in matrices}


def _dev_f1(model: EnsembleCrfModel, dev: EnsembleDataset, averaging: str) -> float:
    predicted = [
        LabeledSentence(sent.sentence_id, sent.tokens, tuple(ensemble_predict(model, pm)))
        for sent, pm in zip(dev.sentences, dev.matrices)
    ]
    return entity_f1(dev.sentences, predicted, averaging=averaging).aggregate.f1


def ensemble_train(
    dataset: EnsembleDataset,
    config: EnsembleConfig = EnsembleConfig(),
    dev_dataset: EnsembleDataset | None = None,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    averaging: str = "micro",
) -> EnsembleCrfModel:
    """Train the stack end to end by backpropagating the CRF NLL.

    When a dev set is given, the checkpoint with the best dev F1 is
    returned and training stops early after ``patience`` stale epochs.
    """
    if len(dataset) == 0:
        raise DataError("ensemble training needs at least one sentence")
    labels = label_inventory(entity_types)
    label_index = {label: i for i, label in enumerate(labels)}
    model_ids = dataset.matrices[0].model_ids
    model = EnsembleCrfModel.initialize(model_ids, labels, config)

    features = [one_hot_encode(pm, labels) for pm in dataset.matrices]
    gold = []
    for sent in dataset.sentences:
        try:
            gold.append([label_index[label] for label in sent.labels])
        except KeyError as exc:
            raise DataError(
                f"gold label {exc.args[0]!r} in sentence {sent.sentence_id!r} "
                f"is outside the label inventory"
            ) from exc

    params = model.crf_params
    frozen = {
        "transitions": ~np.isfinite(params.transitions),
        "start": ~np.isfinite(params.start),
        "stop": ~np.isfinite(params.stop),
    }
    trainable: dict[str, np.ndarray] = {
        "W1": model.weights[0], "b1": model.biases[0],
        "W2": model.weights[1], "b2": model.biases[1],
        "W3": model.weights[2], "b3": model.biases[2],
        "transitions": params.transitions, "start": params.start, "stop": params.stop,
    }
    sgd_config = crf.TrainConfig(
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    optimizer = crf.SgdMomentum(
        trainable, sgd_config, frozen=frozen,
        decay_keys=frozenset({"W1", "W2", "W3", "transitions"}),
    )
    rng = np.random.default_rng(config.seed)

    best_model = copy.deepcopy(model)
    best_f1 = -1.0
    stale = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(dataset))
        epoch_nll = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            grads = {key: np.zeros_like(value) for key, value in trainable.items()}
            for i in batch:
                x = features[i]
                h1_pre = x @ model.weights[0] + model.biases[0]
                h1 = np.maximum(h1_pre, 0.0)
                h2_pre = h1 @ model.weights[1] + model.biases[1]
                h2 = np.maximum(h2_pre, 0.0)
                emissions = h2 @ model.weights[2] + model.biases[2]

                nll, crf_grad = crf.nll_and_gradient(params.potentials(emissions), gold[i])
                epoch_nll += nll
                grads["transitions"] += crf_grad.transitions
                grads["start"] += crf_grad.start
                grads["stop"] += crf_grad.stop

                d_e = crf_grad.emissions
                grads["W3"] += h2.T @ d_e
                grads["b3"] += d_e.sum(axis=0)
                d_h2 = (d_e @ model.weights[2].T) * (h2_pre > 0.0)
                grads["W2"] += h1.T @ d_h2
                grads["b2"] += d_h2.sum(axis=0)
                d_h1 = (d_h2 @ model.weights[1].T) * (h1_pre > 0.0)
                grads["W1"] += x.T @ d_h1
                grads["b1"] += d_h1.sum(axis=0)
            for key in grads:
                grads[key] /= len(batch)
            optimizer.step(grads)
        epoch_nll /= len(dataset)
        if not np.isfinite(epoch_nll):
            raise crf.TrainingDivergedError(
                f"ensemble training NLL became {epoch_nll} at epoch {epoch} "
                f"(lr={config.learning_rate}); reduce the learning rate"
            )

        if dev_dataset is not None:
            f1 = _dev_f1(model, dev_dataset, averaging)
            if f1 > best_f1 + 1e-12:
                best_f1 = f1
                best_model = copy.deepcopy(model)
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    break

    return best_model if dev_dataset is not None else model


@dataclass(frozen=True)
class SubsetResult:
    model_ids: tuple[str, ...]
    dev_f1: float


def _subset_seed(base_seed: int, model_ids: Sequence[str]) -> int:
    digest = hashlib.sha256(f"{base_seed}|{','.join(model_ids)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def subset_search(
    predictions: Mapping[str, Mapping[str, Sequence[str]]],
    train_corpus: Sequence[LabeledSentence],
    dev_corpus: Sequence[LabeledSentence],
    config: EnsembleConfig = EnsembleConfig(),
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    averaging: str = "micro",
    max_models: int = 8,
    force: bool = False,
    threads: int = 1,
) -> list[SubsetResult]:
    """Train one stack per nonempty model subset and rank them by dev F1.

    Every subset trains with the same hyperparameters; each derives its RNG
    seed from (seed, subset), so results are independent of execution order
    and of the thread count. Ranking: F1 desc, subset size asc, ids lex.
    """
    model_ids = tuple(sorted(predictions))
    if len(model_ids) > max_models and not force:
        raise DataError(
            f"{len(model_ids)} base models means {2 ** len(model_ids) - 1} subsets; "
            f"pass force=True to exceed the cap of {max_models}"
        )

    subsets = [
        ids
        for size in range(1, len(model_ids) + 1)
        for ids in combinations(model_ids, size)
    ]

    def evaluate(subset: tuple[str, ...]) -> SubsetResult:
        subset_preds = {mid: predictions[mid] for mid in subset}
        train_ds = build_dataset(train_corpus, subset_preds, subset)
        dev_ds = build_dataset(dev_corpus, subset_preds, subset)
        subset_config = EnsembleConfig(
            **{**config.to_dict(), "seed": _subset_seed(config.seed, subset)}
        )
        model = ensemble_train(
            train_ds, subset_config, dev_dataset=dev_ds,
            entity_types=entity_types, averaging=averaging,
        )
        return SubsetResult(subset, _dev_f1(model, dev_ds, averaging))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(evaluate, subsets))
    else:
        results = [evaluate(s) for s in subsets]
    return sorted(results, key=lambda r: (-r.dev_f1, len(r.model_ids), r.model_ids))
