"""Single command-line entry point for every pipeline stage.

Exit codes: 0 success, 1 data errors, 2 usage errors. Config files hold
``key = value`` lines (# comments allowed); explicit flags win over config
values, which win over defaults.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from lpwp import __version__, augment as augment_mod, corpus as corpus_io
from lpwp import declarations as decl_mod
from lpwp import ensemble as ensemble_mod
from lpwp import lp as lp_mod
from lpwp.crf import InfeasiblePathError, TrainingDivergedError
from lpwp.errors import DataError
from lpwp.tagging import entity_f1, repair_iob, validate_iob

logger = logging.getLogger("lpwp")


def load_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError(f"{path}, line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def apply_config(ctx: click.Context, config_path: str | None) -> None:
    """Fill parameters from a config file unless set explicitly on the line."""
    if not config_path:
        return
    values = load_config_file(config_path)
    params = {p.name: p for p in ctx.command.params}
    for key, raw in values.items():
        if key in ("config",) or key not in params:
            raise click.UsageError(f"unknown config key {key!r} for {ctx.command.name}")
        if ctx.get_parameter_source(key) != click.core.ParameterSource.COMMANDLINE:
            ctx.params[key] = params[key].type.convert(raw, params[key], ctx)


def log_run(ctx: click.Context) -> None:
    logger.info("command=%s config=%s", ctx.command.name, ctx.params)


def print_version(ctx, param, value):
    if not value or ctx.resilient_parsing:
        return
    click.echo(
        f"lpwp {__version__} "
        f"(checkpoint format {ensemble_mod.CHECKPOINT_FORMAT_VERSION})"
    )
    ctx.exit()


@click.group()
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--version", is_flag=True, callback=print_version,
              expose_value=False, is_eager=True, help="Print tool and file-format versions.")
def cli(log_level):
    """Consensus NER, corpus augmentation, declaration tooling and LP solving."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# augment


@cli.command("augment")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--techniques", default="lwtr,sr,mr,sis", show_default=True,
              help="Comma-separated subset of lwtr,sr,mr,sis.")
@click.option("--p", "probability", default=0.3, show_default=True, type=float)
@click.option("--copies", default=1, show_default=True, type=int)
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--synonyms", "synonyms_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON object {word: [synonyms...]}; required for sr.")
@click.option("--split", default="train", show_default=True,
              type=click.Choice(["train", "dev", "test"]))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def augment_cmd(ctx, in_path, out_path, techniques, probability, copies, seed,
                synonyms_path, split, config_path):
    """Expand a training corpus with augmented copies."""
    apply_config(ctx, config_path)
    probability, copies, seed = ctx.params["probability"], ctx.params["copies"], ctx.params["seed"]
    techniques, split = ctx.params["techniques"], ctx.params["split"]
    synonyms_path = ctx.params["synonyms_path"]
    if split != "train":
        raise click.UsageError("evaluation splits are never augmented; only --split train is allowed")
    names = [t.strip() for t in techniques.split(",") if t.strip()]
    unknown = [t for t in names if t not in augment_mod.TECHNIQUES]
    if unknown:
        raise click.UsageError(f"unknown technique(s): {', '.join(unknown)}")
    synonym_table = None
    if synonyms_path:
        synonym_table = json.loads(Path(synonyms_path).read_text(encoding="utf-8"))
    if "sr" in names and not synonym_table:
        raise click.UsageError("sr needs --synonyms")
    log_run(ctx)
    configs = [
        augment_mod.AugmentConfig(
            technique=name,
            replace_probability=probability,
            copies_per_sentence=copies,
            rng_seed=seed,
            synonym_table=synonym_table if name == "sr" else None,
        )
        for name in names
    ]
    corpus = corpus_io.read_conll(in_path)
    augmented = augment_mod.augment_corpus(corpus, configs)
    corpus_io.write_conll(out_path, augmented)
    click.echo(f"{len(corpus)} sentences in, {len(augmented)} out -> {out_path}")


# ---------------------------------------------------------------------------
# ner


@cli.group("ner")
def ner_group():
    """Scoring and validation for labeled corpora."""


def _load_pred_corpus(gold, pred_path: str):
    if pred_path.endswith(".jsonl"):
        return corpus_io.predictions_to_corpus(gold, corpus_io.read_predictions(pred_path))
    return corpus_io.read_conll(pred_path)


@ner_group.command("score")
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--averaging", default="micro", show_default=True,
              type=click.Choice(["micro", "macro"]))
@click.pass_context
def ner_score(ctx, gold_path, pred_path, averaging):
    """Entity-level P/R/F1 of predictions against a gold corpus."""
    log_run(ctx)
    gold = corpus_io.read_conll(gold_path)
    pred = _load_pred_corpus(gold, pred_path)
    report = entity_f1(gold, pred, averaging=averaging)
    rows = [("type", "precision", "recall", "f1", "gold", "pred")]
    for etype, s in sorted(report.per_type.items()):
        rows.append((etype, f"{s.precision:.4f}", f"{s.recall:.4f}", f"{s.f1:.4f}",
                     str(s.gold_count), str(s.pred_count)))
    for name, s in (("micro", report.micro), ("macro", report.macro)):
        rows.append((name, f"{s.precision:.4f}", f"{s.recall:.4f}", f"{s.f1:.4f}", "", ""))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        click.echo("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    click.echo(f"{averaging} F1: {report.aggregate.f1:.4f}")


@ner_group.command("validate")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def ner_validate(ctx, in_path):
    """Report IOB violations in a corpus or prediction file (exit 1 if any)."""
    log_run(ctx)
    if in_path.endswith(".jsonl"):
        items = corpus_io.read_predictions(in_path).items()
    else:
        items = ((s.sentence_id, s.labels) for s in corpus_io.read_conll(in_path))
    bad = 0
    for sid, labels in items:
        for violation in validate_iob(labels):
            bad += 1
            click.echo(f"{sid}\tindex {violation.index}\t{violation.reason}")
    if bad:
        raise DataError(f"{bad} IOB violation(s) found")
    click.echo("ok")


# ---------------------------------------------------------------------------
# ensemble


def _read_prediction_files(paths) -> dict[str, dict[str, list[str]]]:
    predictions = {}
    for path in paths:
        model_id = Path(path).stem
        if model_id in predictions:
            raise DataError(f"two prediction files share the model id {model_id!r}")
        predictions[model_id] = corpus_io.read_predictions(path)
    return predictions


_HYPER_OPTIONS = [
    click.option("--hidden1", default=128, show_default=True, type=int),
    click.option("--hidden2", default=128, show_default=True, type=int),
    click.option("--lr", default=0.05, show_default=True, type=float),
    click.option("--momentum", default=0.9, show_default=True, type=float),
    click.option("--decay", default=1e-4, show_default=True, type=float),
    click.option("--batch", default=8, show_default=True, type=int),
    click.option("--epochs", default=30, show_default=True, type=int),
    click.option("--patience", default=5, show_default=True, type=int),
    click.option("--seed", default=0, show_default=True, type=int),
    click.option("--averaging", default="micro", show_default=True,
                 type=click.Choice(["micro", "macro"])),
]


def _with_hyper_options(fn):
    for option in reversed(_HYPER_OPTIONS):
        fn = option(fn)
    return fn


def _ensemble_config(params) -> ensemble_mod.EnsembleConfig:
    return ensemble_mod.EnsembleConfig(
        hidden1=params["hidden1"], hidden2=params["hidden2"],
        learning_rate=params["lr"], momentum=params["momentum"],
        weight_decay=params["decay"], batch_size=params["batch"],
        max_epochs=params["epochs"], patience=params["patience"],
        seed=params["seed"],
    )


@cli.group("ensemble")
def ensemble_group():
    """Train and apply the stacked consensus labeler."""


@ensemble_group.command("train")
@click.option("--preds", "pred_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False),
              help="One JSONL prediction file per base model (repeatable).")
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dev", "dev_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--impute-o", is_flag=True,
              help="Use an all-O row when a model lacks a sentence (default: error).")
@_with_hyper_options
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def ensemble_train_cmd(ctx, pred_paths, gold_path, dev_path, out_path, impute_o, config_path, **_):
    """Fit the one-hot -> linear layers -> CRF stack on base-model predictions."""
    apply_config(ctx, config_path)
    log_run(ctx)
    predictions = _read_prediction_files(pred_paths)
    model_ids = [Path(p).stem for p in pred_paths]
    train_corpus = corpus_io.read_conll(gold_path)
    train_ds = ensemble_mod.build_dataset(train_corpus, predictions, model_ids,
                                          impute_missing=impute_o)
    dev_ds = None
    if dev_path:
        dev_corpus = corpus_io.read_conll(dev_path)
        dev_ds = ensemble_mod.build_dataset(dev_corpus, predictions, model_ids,
                                            impute_missing=impute_o)
    config = _ensemble_config(ctx.params)
    model = ensemble_mod.ensemble_train(train_ds, config, dev_dataset=dev_ds,
                                        averaging=ctx.params["averaging"])
    model.save(out_path)
    click.echo(f"trained on {len(train_ds)} sentences; checkpoint -> {out_path}")


@ensemble_group.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--preds", "pred_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--impute-o", is_flag=True)
@click.pass_context
def ensemble_predict_cmd(ctx, model_path, pred_paths, out_path, impute_o):
    """Decode consensus labels for every sentence in the prediction files."""
    log_run(ctx)
    model = ensemble_mod.EnsembleCrfModel.load(model_path)
    predictions = _read_prediction_files(pred_paths)
    if set(predictions) != set(model.model_ids):
        raise DataError(
            f"checkpoint needs prediction files for {sorted(model.model_ids)}, "
            f"got {sorted(predictions)}"
        )
    sentence_ids = list(predictions[model.model_ids[0]])
    consensus = {}
    for sid in sentence_ids:
        rows = []
        length = len(predictions[model.model_ids[0]][sid])
        for mid in model.model_ids:
            labels = predictions[mid].get(sid)
            if labels is None:
                if not impute_o:
                    raise DataError(f"model {mid!r} has no prediction for sentence {sid!r}")
                labels = ["O"] * length
            rows.append(tuple(labels))
        pm = ensemble_mod.PredictionMatrix(sid, model.model_ids, tuple(rows))
        consensus[sid] = ensemble_mod.ensemble_predict(model, pm)
    corpus_io.write_predictions(out_path, consensus)
    click.echo(f"{len(consensus)} consensus sentences -> {out_path}")


@ensemble_group.command("search")
@click.option("--preds", "pred_paths", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dev", "dev_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--max-models", default=8, show_default=True, type=int)
@click.option("--force", is_flag=True, help="Allow more than --max-models base models.")
@click.option("--threads", default=1, show_default=True, type=int)
@_with_hyper_options
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def ensemble_search_cmd(ctx, pred_paths, gold_path, dev_path, max_models, force, threads,
                        config_path, **_):
    """Train every model subset and rank them by dev F1."""
    apply_config(ctx, config_path)
    log_run(ctx)
    predictions = _read_prediction_files(pred_paths)
    results = ensemble_mod.subset_search(
        predictions,
        corpus_io.read_conll(gold_path),
        corpus_io.read_conll(dev_path),
        config=_ensemble_config(ctx.params),
        averaging=ctx.params["averaging"],
        max_models=max_models,
        force=force,
        threads=threads,
    )
    for rank, result in enumerate(results, 1):
        click.echo(f"{rank:3d}  f1={result.dev_f1:.4f}  {'+'.join(result.model_ids)}")


# ---------------------------------------------------------------------------
# decl


@cli.group("decl")
def decl_group():
    """Declaration-language tools: parse, decompose, wrap, score, stats."""


@decl_group.command("parse")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--render", is_flag=True, help="Print the normalized mapping text instead of JSON.")
@click.pass_context
def decl_parse(ctx, in_path, render):
    """Parse a mapping file; print its AST as JSON (or normalized text)."""
    log_run(ctx)
    doc = decl_mod.parse_mapping(Path(in_path).read_text(encoding="utf-8"))
    if render:
        click.echo(decl_mod.serialize_mapping(doc))
    else:
        click.echo(json.dumps(decl_mod.document_to_json(doc), indent=2))


@decl_group.command("serialize")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON AST as produced by `decl parse`.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@click.pass_context
def decl_serialize(ctx, in_path, out_path):
    """Serialize a JSON AST back to mapping text."""
    log_run(ctx)
    try:
        data = json.loads(Path(in_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{in_path}: invalid JSON ({exc})") from exc
    text = decl_mod.serialize_mapping(decl_mod.document_from_json(data))
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


@decl_group.command("decompose")
@click.option("--problem", "problem_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@click.pass_context
def decl_decompose(ctx, problem_path, out_path):
    """Split a problem's mapping into the eight prompt tasks (JSONL)."""
    log_run(ctx)
    problem = decl_mod.load_problem(problem_path)
    doc = decl_mod.parse_mapping(problem.mapping)
    wrapped = decl_mod.wrap_entities(problem.text, problem.entities)
    lines = [
        json.dumps({"prompt": t.prompt, "input": t.input_text, "target": t.target},
                   ensure_ascii=False)
        for t in decl_mod.decompose(doc, wrapped)
    ]
    payload = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(payload, encoding="utf-8")
    else:
        click.echo(payload, nl=False)


@decl_group.command("recompose")
@click.option("--tasks", "tasks_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@click.pass_context
def decl_recompose(ctx, tasks_path, out_path):
    """Merge task outputs (JSONL with prompt/input/target) into one mapping."""
    log_run(ctx)
    tasks = []
    for lineno, line in enumerate(Path(tasks_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            tasks.append(decl_mod.PromptTask(record["prompt"], record.get("input", ""),
                                             record.get("target", "")))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{tasks_path}, line {lineno}: bad task record ({exc})") from exc
    result = decl_mod.recompose(tasks)
    for issue in result.issues:
        click.echo(f"task {issue.task_index} ({issue.prompt}): {issue.message}", err=True)
    text = decl_mod.serialize_mapping(result.document)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


@decl_group.command("wrap")
@click.option("--problem", "problem_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def decl_wrap(ctx, problem_path):
    """Print the problem text with entity spans wrapped inline."""
    log_run(ctx)
    problem = decl_mod.load_problem(problem_path)
    click.echo(decl_mod.wrap_entities(problem.text, problem.entities))


@decl_group.command("score")
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--jsonl", is_flag=True,
              help="Treat inputs as JSONL of {id, mapping} and report the mean accuracy.")
@click.pass_context
def decl_score(ctx, gold_path, pred_path, jsonl):
    """Declaration-level accuracy of predicted mappings against gold."""
    log_run(ctx)
    if not jsonl:
        gold = decl_mod.parse_mapping(Path(gold_path).read_text(encoding="utf-8"))
        pred = decl_mod.parse_mapping(Path(pred_path).read_text(encoding="utf-8"))
        report = decl_mod.declaration_match_report(gold, pred)
        click.echo(f"accuracy:  {report.accuracy:.4f} ({report.matched}/{report.gold_count})")
        click.echo(f"precision: {report.precision:.4f} ({report.matched}/{report.pred_count})")
        return

    def read_mappings(path):
        mappings = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            record = json.loads(line)
            mappings[str(record.get("id", lineno - 1))] = record["mapping"]
        return mappings

    gold_maps = read_mappings(gold_path)
    pred_maps = read_mappings(pred_path)
    pairs = []
    for pid, gold_text in gold_maps.items():
        gold_doc = decl_mod.parse_mapping(gold_text)
        pred_doc = None
        if pid in pred_maps:
            try:
                pred_doc = decl_mod.parse_mapping(pred_maps[pid])
            except decl_mod.GrammarError as exc:
                click.echo(f"{pid}: prediction unparseable ({exc})", err=True)
        pairs.append((gold_doc, pred_doc))
    click.echo(f"mean accuracy over {len(pairs)} problems: "
               f"{decl_mod.corpus_declaration_accuracy(pairs):.4f}")


@decl_group.command("stats")
@click.option("--problems", "problems_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--budget", default=512, show_default=True, type=int)
@click.option("--prefix", default=decl_mod.DEFAULT_PREFIX, show_default=True)
@click.pass_context
def decl_stats(ctx, problems_path, budget, prefix):
    """Whitespace-token statistics for the four training-input variants."""
    log_run(ctx)
    problems = decl_mod.load_problems_jsonl(problems_path)
    report = decl_mod.token_stats(problems, budget=budget, prefix=prefix)
    click.echo(f"{'variant':24}{'n':>6}{'in max':>8}{'in mean':>9}{'out max':>9}{'out mean':>10}")
    for variant in decl_mod.VARIANTS:
        s = report.variants[variant]
        click.echo(f"{variant:24}{s.instances:>6}{s.input_max:>8}{s.input_mean:>9.1f}"
                   f"{s.output_max:>9}{s.output_mean:>10.1f}")
    for flag in report.flags:
        click.echo(f"over budget ({report.budget}): problem {flag.problem_id}, "
                   f"{flag.variant}, {flag.side}={flag.tokens}", err=True)


# ---------------------------------------------------------------------------
# lp


@cli.group("lp")
def lp_group():
    """Linear programs from mapping documents."""


@lp_group.command("solve")
@click.option("--mapping", "mapping_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", default="text", show_default=True,
              type=click.Choice(["json", "text"]))
@click.pass_context
def lp_solve(ctx, mapping_path, fmt):
    """Canonicalize a mapping and solve it with the simplex method."""
    log_run(ctx)
    doc = decl_mod.parse_mapping(Path(mapping_path).read_text(encoding="utf-8"))
    solution = lp_mod.solve_mapping(doc)
    if fmt == "json":
        click.echo(json.dumps({
            "status": solution.status,
            "assignment": solution.assignment,
            "objective": solution.objective,
        }))
        return
    click.echo(f"status: {solution.status}")
    if solution.status == "optimal":
        for name, value in solution.assignment.items():
            click.echo(f"  {name} = {value:g}")
        click.echo(f"objective: {solution.objective:g}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 2
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 130
    except (DataError, InfeasiblePathError, TrainingDivergedError,
            lp_mod.LpNumericalError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
