"""Command line: easq {gen-data, train, eval, ablate, sweep, validate-sim}."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config, parse_override, write_config_echo, SECTIONS
from .data import write_jsonl
from .errors import ConfigError, EasqError, InsufficientDataError
from .evaluator import METRICS, EvalReport
from .model import EasqModel
from .pipeline import (BASELINE, VARIANTS, Dataset, RunResult, evaluate_on, fit_to_data,
                       load_dataset, paired_sign_tests, run_variants, simulate_dataset, split,
                       summarize, variant_config, write_csv, write_dataset)
from .simenv import convergent_validity
from .trainer import (Trainer, load_checkpoint, read_manifest, save_checkpoint,
                      write_train_log)

log = logging.getLogger("easq")

EXIT_OK = 0
# fields a resumed run may change without invalidating the stream position
RESUMABLE_TRAIN_KEYS = {"steps", "epochs", "checkpoint_every", "eval_every"}


def _prepare_out(path: Path, force: bool = True) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"{path} exists and is not a directory")
    if not force and path.is_dir() and any(path.iterdir()):
        raise ConfigError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _write_report(report: EvalReport, out: Path, stem: str = "eval_report") -> None:
    report.write_json(out / f"{stem}.json")
    (out / f"{stem}.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n",
                                     encoding="utf-8")


# -- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = _config(args)
    out = _prepare_out(args.out, force=args.force)
    ds, _ = simulate_dataset(run)
    write_dataset(ds, out, debug=args.debug)
    write_config_echo(run, out)
    log.info("wrote %d interactions, %d questionnaire rows (%d answered) to %s",
             ds.meta["n_interactions"], ds.meta["n_questionnaire_rows"],
             ds.meta["n_answered"], out)
    return EXIT_OK


def _resume(run: RunConfig, ckpt: Path, ds: Dataset) -> Trainer:
    trainer = load_checkpoint(ckpt, ds.catalog)
    expected = variant_config(run.model, run.train.ablation)
    if trainer.model.config != expected:
        raise ConfigError(f"{ckpt}: model config differs from the requested run")
    stored = trainer.config.to_dict()
    wanted = run.train.to_dict()
    changed = sorted(k for k in wanted if wanted[k] != stored[k] and k not in RESUMABLE_TRAIN_KEYS)
    if changed:
        raise ConfigError(f"{ckpt}: cannot resume with different train settings {changed}")
    trainer.config = run.train
    return trainer


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    run = fit_to_data(_config(args), ds)
    out = _prepare_out(args.out)
    write_config_echo(run, out)
    train_log, test_log = split(run, ds.log())
    if args.resume:
        trainer = _resume(run, Path(args.resume), ds)
    else:
        model = EasqModel.init(variant_config(run.model, run.train.ablation).validate())
        trainer = Trainer(model, run.train, ds.catalog)

    ckpt_dir = out / "checkpoints"
    eval_rows: list[dict] = []

    def on_step(t: Trainer) -> None:
        every = run.train.checkpoint_every
        if every and t.step % every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(ckpt_dir / f"step_{t.step:06d}.ckpt", t)
        if run.train.eval_every and t.step % run.train.eval_every == 0:
            report = evaluate_on(run, t.model, ds.catalog, test_log)
            eval_rows.append({"step": t.step, "status": report.status,
                              **{m: report.metrics.get(m, float("nan")) for m in METRICS}})

    trainer.fit(train_log, on_step=on_step)
    save_checkpoint(out / "final.ckpt", trainer)
    write_train_log(out / "train_log.csv", trainer.history)
    if eval_rows:
        write_csv(out / "eval_log.csv", eval_rows)
    log.info("trained %d steps; checkpoint at %s", trainer.step, out / "final.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    run = fit_to_data(_config(args), ds)
    out = _prepare_out(args.out)
    manifest, _ = read_manifest(args.checkpoint)
    trainer = load_checkpoint(args.checkpoint, ds.catalog)
    model_cfg = trainer.model.config
    if (model_cfg.n_users, model_cfg.n_items) != (ds.n_users, ds.n_items):
        raise ConfigError("checkpoint vocabulary does not match the data")
    run = replace(run, model=model_cfg)
    write_config_echo(run, out)
    _, test_log = split(run, ds.log())
    report = evaluate_on(run, trainer.model, ds.catalog, test_log)
    _write_report(report, out)
    if report.status != "ok":
        raise InsufficientDataError("no Satisfied answers in the evaluation window")
    log.info("step %d: %s", manifest["step"],
             " ".join(f"{m}={report.metrics[m]:.4f}" for m in METRICS))
    return EXIT_OK


def _write_comparison(out: Path, results: list[RunResult], reference: str) -> None:
    write_csv(out / "runs.csv", [r.row() for r in results])
    write_csv(out / "summary.csv", summarize(results))
    if any(r.variant == reference for r in results):
        write_csv(out / "sign_tests.csv", paired_sign_tests(results, reference))


def cmd_ablate(args) -> int:
    if len(args.seeds) < 3:
        raise ConfigError("ablate needs at least 3 seeds")
    ds = load_dataset(args.data)
    run = fit_to_data(_config(args), ds)
    out = _prepare_out(args.out)
    write_config_echo(run, out)
    variants = list(args.variants)
    results = run_variants(run, ds, variants, args.seeds,
                           on_result=lambda r: log.info("%s seed %d ndcg@5=%s", r.variant, r.seed,
                                                        r.report.metrics.get("ndcg@5")))
    _write_comparison(out, results, "full")
    return EXIT_OK


def _parse_grid(items) -> dict[tuple[str, str], list]:
    grid = {}
    for text in items or ():
        path, values = parse_override(text)
        if len(path) != 2 or path[0] not in SECTIONS:
            raise ConfigError(f"grid key {text!r} must be section.key")
        if not isinstance(values, list):
            values = [values]
        grid[tuple(path)] = values
    if not grid:
        raise ConfigError("sweep needs at least one --grid section.key=[v1,v2,...]")
    return grid


def cmd_sweep(args) -> int:
    ds = load_dataset(args.data)
    base = _config(args)
    out = _prepare_out(args.out)
    write_config_echo(fit_to_data(base, ds), out)
    grid = _parse_grid(args.grid)
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = list(args.set or ()) + [f"{s}.{k}={json.dumps(v)}"
                                            for (s, k), v in zip(keys, combo)]
        run = load_config(args.config, overrides)
        for res in run_variants(run, ds, [args.variant], args.seeds):
            row = {f"{s}.{k}": v for (s, k), v in zip(keys, combo)}
            row.update(res.row())
            rows.append(row)
            log.info("%s -> ndcg@5=%s", row, res.report.metrics.get("ndcg@5"))
    write_csv(out / "sweep.csv", rows)
    return EXIT_OK


def cmd_validate_sim(args) -> int:
    ds = load_dataset(args.data)
    out = _prepare_out(args.out)
    report = convergent_validity(ds.events, ds.responses)
    (out / "validity_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rows = [{"status": report.status, **vars(s)} for s in report.signals]
    write_csv(out / "validity_report.csv", rows or [{"status": report.status}])
    if report.status != "ok":
        raise InsufficientDataError("need at least one Satisfied and one Dissatisfied answer")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="easq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a world and write its logs")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("--debug", action="store_true", help="include true satisfaction s_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train once over the chronological training split")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="questionnaire-grounded ranking metrics")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model against each ablation over several seeds")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=["full", "no_lora", "no_moe", "no_dpo"],
                   choices=VARIANTS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over config values, one CSV row per run")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--grid", action="append", metavar="SECTION.KEY=[V1,V2]",
                   help="values to sweep (repeatable; the grid is their product)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate-sim", help="questionnaire answers against posterior behaviour")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_validate_sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except EasqError as exc:
        print(f"easq: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
