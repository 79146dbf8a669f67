"""The declaration language for word-problem meaning representations.

A mapping document is a ``<s>``-wrapped sequence of declaration blocks, each
holding either the objective or one constraint as tag-delimited fields:

    <s>
    <DECLARATION>
    <OBJ_DIR> maximize </OBJ_DIR>
    <OBJ_NAME> number of coconuts </OBJ_NAME> [is]
    <VAR> rickshaws </VAR> [TIMES] <PARAM> 50 </PARAM>
    ...
    </DECLARATION>
    ...
    </s>

This module parses and serializes that language, splits a document into the
eight prompt tasks used for generator fine-tuning (one objective task plus
one task per constraint type, empty targets acting as negative samples),
merges generated task outputs back into a document, wraps entity spans
inline in problem text, reports whitespace-token statistics for the four
training-input variants, and scores predicted documents against gold at the
declaration level.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

from lpwp.errors import DataError, GrammarError

OPERATORS = ("LESS_OR_EQUAL", "GREATER_OR_EQUAL", "EQUAL")

# Canonical constraint-type order, also the order of the prompt tasks.
CONSTRAINT_TYPES = ("SUM", "UPPER_BOUND", "LOWER_BOUND", "LINEAR", "RATIO", "XBY", "XY")

_TYPE_TOKENS = {
    "SUM": "[SUM_CONSTRAINT]",
    "UPPER_BOUND": "[UPPER_BOUND]",
    "LOWER_BOUND": "[LOWER_BOUND]",
    "LINEAR": "[LINEAR_CONSTRAINT]",
    "RATIO": "[RATIO_CONSTRAINT]",
    "XBY": "[XBY_CONSTRAINT]",
    "XY": "[XY_CONSTRAINT]",
}
_TYPE_FROM_TOKEN = {tok: name for name, tok in _TYPE_TOKENS.items()}

_ENTITY_FIELDS = ("OBJ_DIR", "OBJ_NAME", "VAR", "PARAM", "CONST_DIR", "OPERATOR", "LIMIT", "CONST_TYPE")
_BLOCK_TAGS = ("DECLARATION", "CONST_DECLARATION", "OBJ_DECLARATION")

OBJECTIVE_PROMPT = "prompt <OBJ_DECLARATION> </OBJ_DECLARATION>:"


def constraint_prompt(const_type: str) -> str:
    return f"prompt <CONST_DECLARATION> {_TYPE_TOKENS[const_type]} </CONST_DECLARATION>:"


PROMPTS = (OBJECTIVE_PROMPT,) + tuple(constraint_prompt(t) for t in CONSTRAINT_TYPES)


# ---------------------------------------------------------------------------
# AST


def _parse_decimal(text: str, offset: int | None = None) -> Decimal:
    try:
        value = Decimal(text.strip())
    except InvalidOperation as exc:
        raise GrammarError(f"expected a number, got {text.strip()!r}", offset) from exc
    if not value.is_finite():
        raise GrammarError(f"non-finite number {text.strip()!r}", offset)
    return value


@dataclass(frozen=True)
class Term:
    """One variable with an optional coefficient (absent = coefficient 1)."""

    variable: str
    coefficient: Decimal | None = None

    def __post_init__(self):
        if not self.variable.strip():
            raise DataError("term variable must be nonempty")
        if self.coefficient is not None and not self.coefficient.is_finite():
            raise DataError(f"term coefficient {self.coefficient} is not finite")


@dataclass(frozen=True)
class ObjectiveDecl:
    direction: str  # maximize | minimize
    name: str
    terms: tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.direction not in ("maximize", "minimize"):
            raise DataError(f"unknown objective direction {self.direction!r}")
        if not self.terms:
            raise DataError("objective needs at least one term")


@dataclass(frozen=True)
class ConstraintDecl:
    const_dir: str
    operator: str
    const_type: str
    terms: tuple[Term, ...]
    limit: Decimal | None = None
    aux: Term | None = None  # right-hand side variable of XY / XBY constraints

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.operator not in OPERATORS:
            raise DataError(f"unknown operator {self.operator!r}")
        if self.const_type not in CONSTRAINT_TYPES:
            raise DataError(f"unknown constraint type {self.const_type!r}")


@dataclass(frozen=True)
class MappingDocument:
    objective: ObjectiveDecl
    constraints: tuple[ConstraintDecl, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def declarations(self) -> tuple:
        return (self.objective,) + self.constraints


# ---------------------------------------------------------------------------
# Tokenizer

_TAG_RE = re.compile(r"<(/?)([A-Za-z_]+)>")
_MARKERS = ("[is]", "[TIMES]")


@dataclass(frozen=True)
class _Token:
    kind: str  # open | close | marker | text
    value: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0

    def emit_between(lo: int, hi: int):
        chunk = text[lo:hi]
        idx = 0
        while idx < len(chunk):
            if chunk[idx].isspace():
                idx += 1
                continue
            for marker in _MARKERS:
                if chunk.startswith(marker, idx):
                    tokens.append(_Token("marker", marker, lo + idx))
                    idx += len(marker)
                    break
            else:
                end = idx
                while end < len(chunk) and not chunk[end].isspace():
                    end += 1
                raise GrammarError(f"unexpected text {chunk[idx:end]!r} outside tags", lo + idx)

    while True:
        match = _TAG_RE.search(text, pos)
        if match is None:
            emit_between(pos, len(text))
            break
        emit_between(pos, match.start())
        closing, name = match.group(1), match.group(2)
        if closing:
            tokens.append(_Token("close", name, match.start()))
            pos = match.end()
        elif name in _ENTITY_FIELDS:
            # entity content is verbatim: grab everything up to the close tag
            close = text.find(f"</{name}>", match.end())
            if close < 0:
                raise GrammarError(f"<{name}> is never closed", match.start())
            tokens.append(_Token("open", name, match.start()))
            tokens.append(_Token("text", text[match.end():close].strip(), match.end()))
            tokens.append(_Token("close", name, close))
            pos = close + len(f"</{name}>")
        else:
            tokens.append(_Token("open", name, match.start()))
            pos = match.end()
    return tokens


# ---------------------------------------------------------------------------
# Parser

class _Cursor:
    def __init__(self, tokens: list[_Token], length: int):
        self.tokens = tokens
        self.pos = 0
        self.length = length

    def peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> _Token:
        token = self.peek()
        if token is None:
            raise GrammarError("unexpected end of input", self.length)
        self.pos += 1
        return token

    def expect(self, kind: str, value: str | None = None) -> _Token:
        token = self.next()
        if token.kind != kind or (value is not None and token.value != value):
            wanted = value if value is not None else kind
            raise GrammarError(f"expected {wanted}, got {token.value!r}", token.offset)
        return token

    def try_marker(self, marker: str) -> bool:
        token = self.peek()
        if token is not None and token.kind == "marker" and token.value == marker:
            self.pos += 1
            return True
        return False


def _entity_text(cursor: _Cursor, name: str) -> tuple[str, int]:
    open_token = cursor.expect("open", name)
    text = cursor.expect("text").value
    cursor.expect("close", name)
    return text, open_token.offset


def _parse_term(cursor: _Cursor) -> Term:
    var_text, offset = _entity_text(cursor, "VAR")
    if not var_text:
        raise GrammarError("empty VAR text", offset)
    coefficient = None
    if cursor.try_marker("[TIMES]"):
        param_text, param_offset = _entity_text(cursor, "PARAM")
        coefficient = _parse_decimal(param_text, param_offset)
    return Term(var_text, coefficient)


def _at_open(cursor: _Cursor, name: str) -> bool:
    token = cursor.peek()
    return token is not None and token.kind == "open" and token.value == name


def _parse_objective_body(cursor: _Cursor) -> ObjectiveDecl:
    direction_text, offset = _entity_text(cursor, "OBJ_DIR")
    direction = direction_text.lower()
    if direction not in ("maximize", "minimize"):
        raise GrammarError(f"unknown objective direction {direction_text!r}", offset)
    name, _ = _entity_text(cursor, "OBJ_NAME")
    cursor.expect("marker", "[is]")
    terms = []
    while _at_open(cursor, "VAR"):
        terms.append(_parse_term(cursor))
    if not terms:
        token = cursor.peek()
        raise GrammarError("objective has no terms", token.offset if token else None)
    return ObjectiveDecl(direction, name, tuple(terms))


def _parse_constraint_body(cursor: _Cursor) -> ConstraintDecl:
    const_dir, _ = _entity_text(cursor, "CONST_DIR")
    operator, op_offset = _entity_text(cursor, "OPERATOR")
    if operator not in OPERATORS:
        raise GrammarError(f"unknown operator {operator!r}", op_offset)
    limit = None
    if _at_open(cursor, "LIMIT"):
        limit_text, limit_offset = _entity_text(cursor, "LIMIT")
        limit = _parse_decimal(limit_text, limit_offset)
    type_text, type_offset = _entity_text(cursor, "CONST_TYPE")
    const_type = _TYPE_FROM_TOKEN.get(type_text)
    if const_type is None:
        raise GrammarError(f"unknown constraint type token {type_text!r}", type_offset)
    cursor.try_marker("[is]")

    first = _parse_term(cursor)
    if first.coefficient is None and cursor.try_marker("[is]"):
        aux = _parse_term(cursor)
        return ConstraintDecl(const_dir, operator, const_type, (first,), limit, aux)
    terms = [first]
    while _at_open(cursor, "VAR"):
        terms.append(_parse_term(cursor))
    return ConstraintDecl(const_dir, operator, const_type, tuple(terms), limit, None)


def _parse_declaration(cursor: _Cursor):
    open_token = cursor.next()
    if open_token.kind != "open" or open_token.value not in _BLOCK_TAGS:
        raise GrammarError(f"expected a declaration block, got {open_token.value!r}", open_token.offset)
    if _at_open(cursor, "OBJ_DIR"):
        decl = _parse_objective_body(cursor)
    else:
        decl = _parse_constraint_body(cursor)
    cursor.expect("close", open_token.value)
    return decl


def _parse_blocks(text: str):
    """All declaration blocks in ``text``, outside any <s> wrapper."""
    cursor = _Cursor(_tokenize(text), len(text))
    declarations = []
    while cursor.peek() is not None:
        declarations.append(_parse_declaration(cursor))
    return declarations


def parse_mapping(text: str) -> MappingDocument:
    cursor = _Cursor(_tokenize(text), len(text))
    cursor.expect("open", "s")
    objective = None
    constraints: list[ConstraintDecl] = []
    while True:
        token = cursor.peek()
        if token is None:
            raise GrammarError("missing </s>", len(text))
        if token.kind == "close" and token.value == "s":
            cursor.next()
            break
        decl = _parse_declaration(cursor)
        if isinstance(decl, ObjectiveDecl):
            if objective is not None:
                raise GrammarError("more than one objective declaration", token.offset)
            objective = decl
        else:
            constraints.append(decl)
    if cursor.peek() is not None:
        raise GrammarError("content after </s>", cursor.peek().offset)
    if objective is None:
        raise GrammarError("missing objective declaration", 0)
    return MappingDocument(objective, tuple(constraints))


# ---------------------------------------------------------------------------
# Serializer (Table-like layout: one tag group per line)


def _term_text(term: Term) -> str:
    if term.coefficient is None:
        return f"<VAR> {term.variable} </VAR>"
    return f"<VAR> {term.variable} </VAR> [TIMES] <PARAM> {term.coefficient} </PARAM>"


def _objective_lines(decl: ObjectiveDecl) -> list[str]:
    lines = [
        f"<OBJ_DIR> {decl.direction} </OBJ_DIR>",
        f"<OBJ_NAME> {decl.name} </OBJ_NAME> [is]",
    ]
    lines.extend(_term_text(term) for term in decl.terms)
    return lines


def _constraint_lines(decl: ConstraintDecl) -> list[str]:
    lines = [
        f"<CONST_DIR> {decl.const_dir} </CONST_DIR>",
        f"<OPERATOR> {decl.operator} </OPERATOR>",
    ]
    if decl.limit is not None:
        lines.append(f"<LIMIT> {decl.limit} </LIMIT>")
    type_line = f"<CONST_TYPE> {_TYPE_TOKENS[decl.const_type]} </CONST_TYPE>"
    if decl.aux is not None:
        lines.append(type_line)
        lines.append(f"<VAR> {decl.terms[0].variable} </VAR> [is] {_term_text(decl.aux)}")
    else:
        lines.append(type_line + " [is]")
        lines.extend(_term_text(term) for term in decl.terms)
    return lines


def serialize_declaration(decl, block_tag: str = "DECLARATION") -> str:
    body = _objective_lines(decl) if isinstance(decl, ObjectiveDecl) else _constraint_lines(decl)
    return "\n".join([f"<{block_tag}>"] + body + [f"</{block_tag}>"])


def serialize_mapping(doc: MappingDocument) -> str:
    blocks = [serialize_declaration(decl) for decl in doc.declarations]
    return "\n".join(["<s>"] + blocks + ["</s>"])


# ---------------------------------------------------------------------------
# JSON form of the AST (CLI interchange)


def document_to_json(doc: MappingDocument) -> dict:
    def term_json(term: Term) -> dict:
        data = {"variable": term.variable}
        if term.coefficient is not None:
            data["coefficient"] = str(term.coefficient)
        return data

    constraints = []
    for c in doc.constraints:
        entry = {
            "const_dir": c.const_dir,
            "operator": c.operator,
            "const_type": c.const_type,
            "terms": [term_json(t) for t in c.terms],
        }
        if c.limit is not None:
            entry["limit"] = str(c.limit)
        if c.aux is not None:
            entry["aux"] = term_json(c.aux)
        constraints.append(entry)
    return {
        "objective": {
            "direction": doc.objective.direction,
            "name": doc.objective.name,
            "terms": [term_json(t) for t in doc.objective.terms],
        },
        "constraints": constraints,
    }


def document_from_json(data: dict) -> MappingDocument:
    def term_from(entry: dict) -> Term:
        coeff = entry.get("coefficient")
        return Term(entry["variable"], Decimal(coeff) if coeff is not None else None)

    try:
        obj = data["objective"]
        objective = ObjectiveDecl(
            obj["direction"], obj["name"], tuple(term_from(t) for t in obj["terms"])
        )
        constraints = tuple(
            ConstraintDecl(
                entry["const_dir"],
                entry["operator"],
                entry["const_type"],
                tuple(term_from(t) for t in entry["terms"]),
                Decimal(entry["limit"]) if "limit" in entry else None,
                term_from(entry["aux"]) if "aux" in entry else None,
            )
            for entry in data.get("constraints", [])
        )
    except (KeyError, TypeError, InvalidOperation) as exc:
        raise DataError(f"malformed document JSON: {exc!r}") from exc
    return MappingDocument(objective, constraints)


# ---------------------------------------------------------------------------
# Multi-task decomposition / recomposition


@dataclass(frozen=True)
class PromptTask:
    """One generator training instance: prompt, wrapped input, target block(s).

    An empty target is a negative sample (the problem has no constraint of
    the prompted type).
    """

    prompt: str
    input_text: str
    target: str

    def __post_init__(self):
        if self.prompt not in PROMPTS:
            raise DataError(f"unknown prompt template {self.prompt!r}")


def decompose(doc: MappingDocument, wrapped_input: str) -> list[PromptTask]:
    """Split a document into exactly eight prompt tasks."""
    tasks = [
        PromptTask(
            OBJECTIVE_PROMPT,
            wrapped_input,
            serialize_declaration(doc.objective, "OBJ_DECLARATION"),
        )
    ]
    for const_type in CONSTRAINT_TYPES:
        blocks = [
            serialize_declaration(c, "CONST_DECLARATION")
            for c in doc.constraints
            if c.const_type == const_type
        ]
        tasks.append(PromptTask(constraint_prompt(const_type), wrapped_input, "\n".join(blocks)))
    return tasks


@dataclass(frozen=True)
class TaskIssue:
    task_index: int
    prompt: str
    message: str


@dataclass
class RecomposeResult:
    document: MappingDocument
    issues: list[TaskIssue] = field(default_factory=list)


def recompose(tasks: Sequence[PromptTask]) -> RecomposeResult:
    """Merge per-task outputs back into one document.

    Constraint blocks are ordered by type (canonical order) then source
    order; structurally identical duplicates collapse to one. A block that
    fails to parse is reported as an issue and the remaining blocks are
    still merged. Zero or multiple objective blocks is a hard error.
    """
    objectives: list[ObjectiveDecl] = []
    by_type: dict[str, list[ConstraintDecl]] = {t: [] for t in CONSTRAINT_TYPES}
    issues: list[TaskIssue] = []
    for index, task in enumerate(tasks):
        if not task.target.strip():
            continue
        try:
            blocks = _parse_blocks(task.target)
        except GrammarError as exc:
            issues.append(TaskIssue(index, task.prompt, str(exc)))
            continue
        for block in blocks:
            if isinstance(block, ObjectiveDecl):
                objectives.append(block)
            else:
                by_type[block.const_type].append(block)
    if len(objectives) != 1:
        raise GrammarError(f"expected exactly one objective block, found {len(objectives)}")
    constraints: list[ConstraintDecl] = []
    seen: set = set()
    for const_type in CONSTRAINT_TYPES:
        for decl in by_type[const_type]:
            if decl not in seen:
                seen.add(decl)
                constraints.append(decl)
    return RecomposeResult(MappingDocument(objectives[0], tuple(constraints)), issues)


# ---------------------------------------------------------------------------
# Entity wrapping


@dataclass(frozen=True, order=True)
class CharSpan:
    """Half-open character span [start, end) of one entity in problem text."""

    start: int
    end: int
    entity_type: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise DataError(f"bad character span ({self.start}, {self.end})")


def wrap_entities(text: str, spans: Iterable[CharSpan | tuple]) -> str:
    """Surround each span with ``<TYPE> ... </TYPE>`` markers, in place."""
    normalized = sorted(
        span if isinstance(span, CharSpan) else CharSpan(*span) for span in spans
    )
    previous_end = 0
    for span in normalized:
        if span.start < previous_end:
            raise DataError(f"overlapping entity spans at {span.start}")
        if span.end > len(text):
            raise DataError(f"entity span ({span.start}, {span.end}) out of bounds")
        previous_end = span.end
    wrapped = text
    for span in reversed(normalized):  # right to left keeps earlier offsets valid
        wrapped = (
            wrapped[:span.start]
            + f"<{span.entity_type}> "
            + wrapped[span.start:span.end]
            + f" </{span.entity_type}>"
            + wrapped[span.end:]
        )
    return wrapped


_WRAP_RE = re.compile(r"<([A-Z_]+)> (.*?) </\1>", re.DOTALL)


def unwrap_entities(wrapped: str) -> tuple[str, list[CharSpan]]:
    """Exact inverse of wrap_entities."""
    parts: list[str] = []
    spans: list[CharSpan] = []
    pos = 0
    length = 0
    for match in _WRAP_RE.finditer(wrapped):
        between = wrapped[pos:match.start()]
        parts.append(between)
        length += len(between)
        content = match.group(2)
        spans.append(CharSpan(length, length + len(content), match.group(1)))
        parts.append(content)
        length += len(content)
        pos = match.end()
    parts.append(wrapped[pos:])
    return "".join(parts), spans


def char_spans_from_token_spans(
    tokens: Sequence[str], token_spans: Iterable
) -> list[CharSpan]:
    """Character spans of token spans under single-space token joining."""
    starts = []
    cursor = 0
    for token in tokens:
        starts.append(cursor)
        cursor += len(token) + 1
    spans = []
    for span in token_spans:
        start = starts[span.start]
        end = starts[span.end - 1] + len(tokens[span.end - 1])
        spans.append(CharSpan(start, end, span.entity_type))
    return spans


# ---------------------------------------------------------------------------
# Problems (text + entity spans + gold mapping)


@dataclass
class Problem:
    text: str
    entities: list[CharSpan]
    mapping: str
    problem_id: str = ""

    @classmethod
    def from_dict(cls, data: dict, default_id: str = "") -> "Problem":
        try:
            entities = [
                CharSpan(int(e["start"]), int(e["end"]), str(e["type"]))
                for e in data.get("entities", [])
            ]
            return cls(data["text"], entities, data["mapping"], str(data.get("id", default_id)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed problem record: {exc!r}") from exc

    def to_dict(self) -> dict:
        record = {
            "text": self.text,
            "entities": [
                {"start": s.start, "end": s.end, "type": s.entity_type} for s in self.entities
            ],
            "mapping": self.mapping,
        }
        if self.problem_id:
            record["id"] = self.problem_id
        return record


def load_problem(path: str | Path) -> Problem:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return Problem.from_dict(data, default_id=Path(path).stem)


def load_problems_jsonl(path: str | Path) -> list[Problem]:
    problems = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}, line {lineno}: invalid JSON ({exc})") from exc
        problems.append(Problem.from_dict(data, default_id=str(lineno - 1)))
    return problems


# ---------------------------------------------------------------------------
# Token statistics for the four training-input variants

VARIANTS = ("original", "multi-task", "augmented", "augmented+multi-task")

# Short single-token generation prefix for the single-task variants; the
# multi-task variants use the longer per-type prompt templates instead.
DEFAULT_PREFIX = "generate:"


def _count(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class VariantStats:
    input_max: int
    input_mean: float
    output_max: int
    output_mean: float
    instances: int


@dataclass(frozen=True)
class BudgetFlag:
    problem_id: str
    variant: str
    side: str  # input | output
    tokens: int


@dataclass
class TokenStatsReport:
    variants: dict[str, VariantStats]
    flags: list[BudgetFlag]
    budget: int


def token_stats(
    problems: Sequence[Problem],
    budget: int = 512,
    prefix: str = DEFAULT_PREFIX,
) -> TokenStatsReport:
    """Whitespace-token length statistics for the four training variants.

    Variants: ``original`` (prefix + raw text -> full mapping),
    ``multi-task`` (prompt + raw text -> per-type blocks), ``augmented``
    (prefix + entity-wrapped text) and ``augmented+multi-task``. Wrapping
    adds exactly two tokens per entity span. Instances whose input or
    output exceeds ``budget`` tokens are flagged.
    """
    samples: dict[str, list[tuple[str, int, int]]] = {v: [] for v in VARIANTS}
    for index, problem in enumerate(problems):
        pid = problem.problem_id or str(index)
        doc = parse_mapping(problem.mapping)
        wrapped = wrap_entities(problem.text, problem.entities)
        full_output = _count(problem.mapping)
        samples["original"].append((pid, _count(prefix) + _count(problem.text), full_output))
        samples["augmented"].append((pid, _count(prefix) + _count(wrapped), full_output))
        for task_text, variant in ((problem.text, "multi-task"), (wrapped, "augmented+multi-task")):
            for task in decompose(doc, task_text):
                samples[variant].append(
                    (pid, _count(task.prompt) + _count(task_text), _count(task.target))
                )

    variants: dict[str, VariantStats] = {}
    flags: list[BudgetFlag] = []
    for variant in VARIANTS:
        rows = samples[variant]
        inputs = [r[1] for r in rows]
        outputs = [r[2] for r in rows]
        variants[variant] = VariantStats(
            input_max=max(inputs) if inputs else 0,
            input_mean=sum(inputs) / len(inputs) if inputs else 0.0,
            output_max=max(outputs) if outputs else 0,
            output_mean=sum(outputs) / len(outputs) if outputs else 0.0,
            instances=len(rows),
        )
        for pid, n_in, n_out in rows:
            if n_in > budget:
                flags.append(BudgetFlag(pid, variant, "input", n_in))
            if n_out > budget:
                flags.append(BudgetFlag(pid, variant, "output", n_out))
    return TokenStatsReport(variants, flags, budget)


# ---------------------------------------------------------------------------
# Declaration-level accuracy


def _canonical_coefficient(coefficient: Decimal | None) -> str:
    value = coefficient if coefficient is not None else Decimal(1)
    return str(value.normalize())


def canonical_declaration_key(decl) -> tuple:
    """Hashable canonical form: terms sorted by variable, decimals normalized,
    absent coefficients read as 1. Surface strings (OBJ_NAME, CONST_DIR) are
    not part of the comparison; operator, type, limit and terms are."""
    terms = tuple(
        sorted((t.variable, _canonical_coefficient(t.coefficient)) for t in decl.terms)
    )
    if isinstance(decl, ObjectiveDecl):
        return ("objective", decl.direction, terms)
    aux = (decl.aux.variable, _canonical_coefficient(decl.aux.coefficient)) if decl.aux else None
    limit = str(decl.limit.normalize()) if decl.limit is not None else None
    return ("constraint", decl.const_type, decl.operator, limit, terms, aux)


@dataclass(frozen=True)
class DeclarationMatchReport:
    accuracy: float    # matched / gold declarations
    precision: float   # matched / predicted declarations (spurious-output diagnostic)
    matched: int
    gold_count: int
    pred_count: int


def declaration_match_report(
    gold: MappingDocument, pred: MappingDocument | None
) -> DeclarationMatchReport:
    """Score pred against gold; pred=None stands for an empty/unparseable output."""
    gold_keys = Counter(canonical_declaration_key(d) for d in gold.declarations)
    pred_decls = pred.declarations if pred is not None else ()
    pred_keys = Counter(canonical_declaration_key(d) for d in pred_decls)
    matched = sum((gold_keys & pred_keys).values())
    gold_count = sum(gold_keys.values())
    pred_count = sum(pred_keys.values())
    return DeclarationMatchReport(
        accuracy=matched / gold_count if gold_count else 0.0,
        precision=matched / pred_count if pred_count else 0.0,
        matched=matched,
        gold_count=gold_count,
        pred_count=pred_count,
    )


def declaration_accuracy(gold: MappingDocument, pred: MappingDocument | None) -> float:
    """Fraction of gold declarations exactly matched after canonicalization."""
    return declaration_match_report(gold, pred).accuracy


def corpus_declaration_accuracy(
    pairs: Sequence[tuple[MappingDocument, MappingDocument | None]]
) -> float:
    if not pairs:
        raise DataError("no document pairs to score")
    return sum(declaration_accuracy(g, p) for g, p in pairs) / len(pairs)
