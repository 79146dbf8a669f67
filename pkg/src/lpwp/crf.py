"""Linear-chain CRF over label sequences, built directly on numpy.

Potentials are log-space scores; -inf marks a forbidden configuration (used
to rule out label bigrams that would break the IOB scheme). The partition
function comes from the forward recursion, decoding from Viterbi, and
gradients from forward-backward marginals. Training is plain mini-batch SGD
with momentum and L2 weight decay.

score(y) = start[y_0] + sum_t em[t, y_t] + sum_t T[y_{t-1}, y_t] + stop[y_{n-1}]
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from lpwp.tagging import split_label

NEG_INF = float("-inf")


class InfeasiblePathError(ValueError):
    """Every candidate path (or the gold path) has score -inf."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


def _check_scores(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if np.isnan(arr).any() or (arr == np.inf).any():
        raise ValueError(f"{name} must be finite or -inf")
    return arr


@dataclass
class ChainPotentials:
    """Log-potentials of one sentence: (n, L) emissions plus chain scores."""

    emissions: np.ndarray   # (n, L)
    transitions: np.ndarray  # (L, L), [i, j] scores i -> j
    start: np.ndarray       # (L,)
    stop: np.ndarray        # (L,)

    def __post_init__(self):
        self.emissions = _check_scores("emissions", self.emissions)
        self.transitions = _check_scores("transitions", self.transitions)
        self.start = _check_scores("start", self.start)
        self.stop = _check_scores("stop", self.stop)
        if self.emissions.ndim != 2 or self.emissions.shape[0] < 1:
            raise ValueError("emissions must be a (n >= 1, L) matrix")
        n, num_labels = self.emissions.shape
        if self.transitions.shape != (num_labels, num_labels):
            raise ValueError("transition matrix does not match label count")
        if self.start.shape != (num_labels,) or self.stop.shape != (num_labels,):
            raise ValueError("start/stop vectors do not match label count")

    @property
    def length(self) -> int:
        return self.emissions.shape[0]

    @property
    def num_labels(self) -> int:
        return self.emissions.shape[1]


def path_score(pot: ChainPotentials, labels: Sequence[int]) -> float:
    labels = list(labels)
    if len(labels) != pot.length:
        raise ValueError(f"path length {len(labels)} != chain length {pot.length}")
    score = pot.start[labels[0]] + pot.emissions[0, labels[0]]
    for t in range(1, pot.length):
        score = score + pot.transitions[labels[t - 1], labels[t]] + pot.emissions[t, labels[t]]
    return float(score + pot.stop[labels[-1]])


def _forward(pot: ChainPotentials) -> np.ndarray:
    """alpha[t, j] = log sum of scores of all prefixes ending in label j at t."""
    alpha = np.empty_like(pot.emissions)
    alpha[0] = pot.start + pot.emissions[0]
    for t in range(1, pot.length):
        alpha[t] = pot.emissions[t] + logsumexp(alpha[t - 1][:, None] + pot.transitions, axis=0)
    return alpha


def _backward(pot: ChainPotentials) -> np.ndarray:
    """beta[t, i] = log sum of scores of all suffixes (incl. stop) from label i at t."""
    beta = np.empty_like(pot.emissions)
    beta[-1] = pot.stop
    for t in range(pot.length - 2, -1, -1):
        beta[t] = logsumexp(pot.transitions + pot.emissions[t + 1] + beta[t + 1], axis=1)
    return beta


def log_partition(pot: ChainPotentials) -> float:
    alpha = _forward(pot)
    return float(logsumexp(alpha[-1] + pot.stop))


def marginals(pot: ChainPotentials) -> np.ndarray:
    """(n, L) posterior label probabilities; each row sums to 1."""
    alpha = _forward(pot)
    beta = _backward(pot)
    log_z = logsumexp(alpha[-1] + pot.stop)
    if not np.isfinite(log_z):
        raise InfeasiblePathError("no label path has finite score")
    return np.exp(alpha + beta - log_z)


def viterbi(pot: ChainPotentials) -> tuple[list[int], float]:
    """Maximum-score label path and its score.

    Ties break toward the smallest label index (np.argmax picks the first
    maximum), so decoding is deterministic.
    """
    n, num_labels = pot.emissions.shape
    delta = pot.start + pot.emissions[0]
    backpointers = np.zeros((n, num_labels), dtype=int)
    for t in range(1, n):
        scores = delta[:, None] + pot.transitions
        backpointers[t] = np.argmax(scores, axis=0)
        delta = pot.emissions[t] + np.max(scores, axis=0)
    final = delta + pot.stop
    best = int(np.argmax(final))
    best_score = float(final[best])
    if not np.isfinite(best_score):
        raise InfeasiblePathError("no label path has finite score")
    path = [best]
    for t in range(n - 1, 0, -1):
        path.append(int(backpointers[t, path[-1]]))
    path.reverse()
    return path, best_score


@dataclass
class CrfGradients:
    emissions: np.ndarray
    transitions: np.ndarray
    start: np.ndarray
    stop: np.ndarray


def nll_and_gradient(pot: ChainPotentials, gold: Sequence[int]) -> tuple[float, CrfGradients]:
    """Negative log-likelihood of the gold path and its analytic gradients.

    Gradients are expected feature counts under the model minus gold counts,
    so every entry of a -inf potential (expected count 0, gold count 0) gets
    gradient exactly 0.
    """
    gold = list(gold)
    gold_score = path_score(pot, gold)
    if not np.isfinite(gold_score):
        raise InfeasiblePathError("gold path has score -inf under these potentials")
    n, num_labels = pot.emissions.shape
    alpha = _forward(pot)
    beta = _backward(pot)
    log_z = float(logsumexp(alpha[-1] + pot.stop))

    gamma = np.exp(alpha + beta - log_z)
    d_emissions = gamma.copy()
    d_emissions[np.arange(n), gold] -= 1.0

    d_transitions = np.zeros((num_labels, num_labels))
    for t in range(1, n):
        log_xi = (
            alpha[t - 1][:, None] + pot.transitions + pot.emissions[t] + beta[t] - log_z
        )
        d_transitions += np.exp(log_xi)
        d_transitions[gold[t - 1], gold[t]] -= 1.0

    d_start = gamma[0].copy()
    d_start[gold[0]] -= 1.0
    d_stop = gamma[-1].copy()
    d_stop[gold[-1]] -= 1.0

    nll = log_z - gold_score
    return nll, CrfGradients(d_emissions, d_transitions, d_start, d_stop)


def iob_constraint_masks(labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (allowed_transitions, allowed_start) masks enforcing IOB2.

    A transition into I-X is allowed only from B-X or I-X, and no sequence
    may start with an I- label. Any label may end a sequence.
    """
    num_labels = len(labels)
    parts = [split_label(label) for label in labels]
    allowed = np.ones((num_labels, num_labels), dtype=bool)
    allowed_start = np.ones(num_labels, dtype=bool)
    for j, (prefix_j, type_j) in enumerate(parts):
        if prefix_j != "I":
            continue
        allowed_start[j] = False
        for i, (prefix_i, type_i) in enumerate(parts):
            if type_i != type_j or prefix_i == "O":
                allowed[i, j] = False
    return allowed, allowed_start


@dataclass
class CrfParams:
    """Learned chain parameters over a fixed, ordered label inventory."""

    labels: tuple[str, ...]
    transitions: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    def __post_init__(self):
        self.labels = tuple(self.labels)
        num_labels = len(self.labels)
        self.transitions = _check_scores("transitions", self.transitions)
        self.start = _check_scores("start", self.start)
        self.stop = _check_scores("stop", self.stop)
        if self.transitions.shape != (num_labels, num_labels):
            raise ValueError("transition matrix does not match label inventory")
        if self.start.shape != (num_labels,) or self.stop.shape != (num_labels,):
            raise ValueError("start/stop vectors do not match label inventory")

    @classmethod
    def zeros(cls, labels: Sequence[str], iob_constraints: bool = True) -> "CrfParams":
        num_labels = len(labels)
        transitions = np.zeros((num_labels, num_labels))
        start = np.zeros(num_labels)
        stop = np.zeros(num_labels)
        if iob_constraints:
            allowed, allowed_start = iob_constraint_masks(labels)
            transitions[~allowed] = NEG_INF
            start[~allowed_start] = NEG_INF
        return cls(tuple(labels), transitions, start, stop)

    def potentials(self, emissions: np.ndarray) -> ChainPotentials:
        return ChainPotentials(emissions, self.transitions, self.start, self.stop)

    def to_dict(self) -> dict:
        forbidden_t = ~np.isfinite(self.transitions)
        forbidden_start = ~np.isfinite(self.start)
        forbidden_stop = ~np.isfinite(self.stop)
        return {
            "labels": list(self.labels),
            "transitions": np.where(forbidden_t, 0.0, self.transitions).tolist(),
            "start": np.where(forbidden_start, 0.0, self.start).tolist(),
            "stop": np.where(forbidden_stop, 0.0, self.stop).tolist(),
            "forbidden_transitions": forbidden_t.tolist(),
            "forbidden_start": forbidden_start.tolist(),
            "forbidden_stop": forbidden_stop.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CrfParams":
        transitions = np.asarray(data["transitions"], dtype=float)
        start = np.asarray(data["start"], dtype=float)
        stop = np.asarray(data["stop"], dtype=float)
        transitions[np.asarray(data["forbidden_transitions"], dtype=bool)] = NEG_INF
        start[np.asarray(data["forbidden_start"], dtype=bool)] = NEG_INF
        stop[np.asarray(data["forbidden_stop"], dtype=bool)] = NEG_INF
        return cls(tuple(data["labels"]), transitions, start, stop)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    shuffle: bool = True


class SgdMomentum:
    """Classic momentum SGD over a dict of named numpy parameters.

    ``frozen`` masks mark entries that must not move (the -inf structural
    constraints); ``decay_keys`` selects which parameters get L2 decay.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        config: TrainConfig,
        frozen: dict[str, np.ndarray] | None = None,
        decay_keys: frozenset[str] = frozenset(),
    ):
        self.params = params
        self.config = config
        self.frozen = frozen or {}
        self.decay_keys = decay_keys
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for key, grad in grads.items():
            param = self.params[key]
            if key in self.decay_keys and self.config.weight_decay:
                decay = self.config.weight_decay * np.where(np.isfinite(param), param, 0.0)
                grad = grad + decay
            vel = self.velocity[key]
            vel *= self.config.momentum
            vel -= self.config.learning_rate * grad
            frozen = self.frozen.get(key)
            if frozen is not None:
                vel[frozen] = 0.0
                param[~frozen] += vel[~frozen]
            else:
                param += vel


@dataclass
class TrainHistory:
    train_nll: list[float] = field(default_factory=list)
    dev_nll: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class CrfTrainResult:
    params: CrfParams
    history: TrainHistory


CrfDataset = Sequence[tuple[np.ndarray, Sequence[int]]]


def _mean_nll(params: CrfParams, dataset: CrfDataset) -> float:
    total = 0.0
    for emissions, gold in dataset:
        pot = params.potentials(emissions)
        total += log_partition(pot) - path_score(pot, gold)
    return total / len(dataset)


def train_crf(
    dataset: CrfDataset,
    config: TrainConfig = TrainConfig(),
    dev_dataset: CrfDataset | None = None,
    labels: Sequence[str] | None = None,
    iob_constraints: bool = False,
) -> CrfTrainResult:
    """Fit transitions/start/stop to sentences with fixed emission scores.

    Early-stops on mean dev NLL when a dev set is given, returning the best
    checkpoint; otherwise runs for ``max_epochs``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    num_labels = dataset[0][0].shape[1]
    if labels is None:
        labels = tuple(str(i) for i in range(num_labels))
    params = CrfParams.zeros(labels, iob_constraints=iob_constraints)
    frozen = {
        "transitions": ~np.isfinite(params.transitions),
        "start": ~np.isfinite(params.start),
        "stop": ~np.isfinite(params.stop),
    }
    optimizer = SgdMomentum(
        {"transitions": params.transitions, "start": params.start, "stop": params.stop},
        config,
        frozen=frozen,
        decay_keys=frozenset({"transitions"}),
    )
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_params = copy.deepcopy(params)
    best_dev = np.inf
    epochs_since_best = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
        epoch_nll = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
            grads = {
                "transitions": np.zeros_like(params.transitions),
                "start": np.zeros_like(params.start),
                "stop": np.zeros_like(params.stop),
            }
            for emissions, gold in batch:
                nll, grad = nll_and_gradient(params.potentials(emissions), gold)
                epoch_nll += nll
                grads["transitions"] += grad.transitions
                grads["start"] += grad.start
                grads["stop"] += grad.stop
            for key in grads:
                grads[key] /= len(batch)
            optimizer.step(grads)
        epoch_nll /= len(dataset)
        if not np.isfinite(epoch_nll):
            raise TrainingDivergedError(
                f"training NLL became {epoch_nll} at epoch {epoch} "
                f"(lr={config.learning_rate}); reduce the learning rate"
            )
        history.train_nll.append(epoch_nll)

        if dev_dataset is not None:
            dev_nll = _mean_nll(params, dev_dataset)
            history.dev_nll.append(dev_nll)
            if dev_nll < best_dev - 1e-12:
                best_dev = dev_nll
                best_params = copy.deepcopy(params)
                history.best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best > config.patience:
                    break

    if dev_dataset is None:
        best_params = params
        history.best_epoch = len(history.train_nll) - 1
    return CrfTrainResult(best_params, history)
