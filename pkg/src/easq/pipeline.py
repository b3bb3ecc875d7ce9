"""End-to-end helpers shared by the command line and the experiment tests."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .config import RunConfig
from .data import (Catalog, EventLog, event_row, read_interactions, read_questionnaire,
                   response_row, time_split, write_jsonl)
from .errors import ConfigError, DataError
from .evaluator import METRICS, EvalReport, evaluate, instances_from_log
from .model import EasqConfig, EasqModel
from .simenv import (InteractionEvent, QuestionnaireResponse, World, generate_logs,
                     init_world)
from .trainer import ABLATIONS, Trainer, ablation_variant, behavior_only

BASELINE = "baseline"
VARIANTS = (BASELINE,) + ABLATIONS

INTERACTIONS_FILE = "interactions.jsonl"
QUESTIONNAIRE_FILE = "questionnaire.jsonl"
META_FILE = "world_meta.json"


@dataclass
class Dataset:
    events: list[InteractionEvent]
    responses: list[QuestionnaireResponse]
    catalog: Catalog
    meta: dict

    def log(self) -> EventLog:
        return EventLog.from_records(self.events, self.responses)

    @property
    def n_users(self) -> int:
        return int(self.meta["n_users"])

    @property
    def n_items(self) -> int:
        return int(self.meta["n_items"])

    @property
    def n_categories(self) -> int:
        return int(self.meta["n_categories"])


def world_meta(world: World, run: RunConfig, events, responses, catalog: Catalog) -> dict:
    return {
        "seed": run.sim.seed,
        "preset": run.sim.preset,
        "rho_hook": run.sim.rho_hook,
        "n_users": world.n_users,
        "n_items": world.n_items,
        "n_categories": run.sim.n_categories,
        "n_hook_items": int(np.count_nonzero(world.hook_bias > 0)),
        "n_interactions": len(events),
        "n_questionnaire_rows": len(responses),
        "n_answered": sum(r.answer != "NONE" for r in responses),
        "catalog": catalog.to_dict(),
    }


def simulate_dataset(run: RunConfig) -> tuple[Dataset, World]:
    world = init_world(run.sim.validate())
    events, responses = generate_logs(world, run.sim)
    catalog = Catalog.from_world(world, run.model.n_duration_buckets)
    return Dataset(events, responses, catalog,
                   world_meta(world, run, events, responses, catalog)), world


def write_dataset(ds: Dataset, out_dir: Path, debug: bool = False) -> None:
    out_dir = Path(out_dir)
    write_jsonl(out_dir / INTERACTIONS_FILE, (event_row(e, debug) for e in ds.events))
    write_jsonl(out_dir / QUESTIONNAIRE_FILE, (response_row(r) for r in ds.responses))
    (out_dir / META_FILE).write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    for name in (INTERACTIONS_FILE, QUESTIONNAIRE_FILE, META_FILE):
        if not (data_dir / name).is_file():
            raise DataError(f"{data_dir / name}: missing")
    try:
        meta = json.loads((data_dir / META_FILE).read_text(encoding="utf-8"))
        catalog = Catalog.from_dict(meta["catalog"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{data_dir / META_FILE}: {exc}") from None
    events = read_interactions(data_dir / INTERACTIONS_FILE)
    responses = read_questionnaire(data_dir / QUESTIONNAIRE_FILE)
    return Dataset(events, responses, catalog, meta)


def fit_to_data(run: RunConfig, ds: Dataset) -> RunConfig:
    return run.with_data_counts(ds.n_users, ds.n_items, ds.n_categories)


def variant_config(model: EasqConfig, variant: str) -> EasqConfig:
    if variant == BASELINE:
        return behavior_only(model)
    return ablation_variant(model, variant)


def split(run: RunConfig, log: EventLog) -> tuple[EventLog, EventLog]:
    return time_split(log, run.eval.train_fraction)


def train_variant(run: RunConfig, train_log: EventLog, catalog: Catalog, variant: str,
                  seed: int | None = None) -> Trainer:
    """Fresh model for one variant, trained once over the training stream."""
    model_cfg, train_cfg = run.model, run.train
    if seed is not None:
        model_cfg = replace(model_cfg, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    if variant != BASELINE:
        train_cfg = replace(train_cfg, ablation=variant)
    trainer = Trainer(EasqModel.init(variant_config(model_cfg, variant).validate()),
                      train_cfg, catalog)
    trainer.fit(train_log)
    return trainer


def evaluate_on(run: RunConfig, model: EasqModel, catalog: Catalog,
                test_log: EventLog) -> EvalReport:
    instances = instances_from_log(test_log, catalog.n_items, run.eval.list_size, run.eval.seed)
    return evaluate(model, catalog, instances)


@dataclass
class RunResult:
    variant: str
    seed: int
    report: EvalReport

    def row(self) -> dict:
        out = {"variant": self.variant, "seed": self.seed, "status": self.report.status,
               "n_users": self.report.n_users, "n_instances": self.report.n_instances}
        out.update({m: self.report.metrics.get(m, float("nan")) for m in METRICS})
        return out


def run_variants(run: RunConfig, ds: Dataset, variants: Sequence[str],
                 seeds: Sequence[int], on_result=None) -> list[RunResult]:
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    run = fit_to_data(run, ds)
    train_log, test_log = split(run, ds.log())
    results = []
    for seed in seeds:
        for v in variants:
            trainer = train_variant(run, train_log, ds.catalog, v, seed)
            res = RunResult(v, int(seed), evaluate_on(run, trainer.model, ds.catalog, test_log))
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results


def summarize(results: Iterable[RunResult]) -> list[dict]:
    """Per-variant mean and standard error over seeds for every metric."""
    by_variant: dict[str, list[RunResult]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r)
    rows = []
    for v, rs in by_variant.items():
        ok = [r for r in rs if r.report.status == "ok"]
        row = {"variant": v, "n_runs": len(rs), "n_ok": len(ok)}
        for m in METRICS:
            vals = np.array([r.report.metrics[m] for r in ok])
            row[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{m}_se"] = (float(vals.std(ddof=1) / np.sqrt(len(vals)))
                              if len(vals) > 1 else float("nan"))
        rows.append(row)
    return rows


def paired_sign_tests(results: Iterable[RunResult], reference: str = "full",
                      metrics: Sequence[str] = METRICS) -> list[dict]:
    """Two-sided sign test of ``reference`` against each other variant, paired by seed."""
    table: dict[tuple[str, int], EvalReport] = {(r.variant, r.seed): r.report for r in results}
    seeds = sorted({s for _, s in table})
    others = sorted({v for v, _ in table if v != reference})
    rows = []
    for other in others:
        for m in metrics:
            wins = losses = ties = 0
            for s in seeds:
                a, b = table.get((reference, s)), table.get((other, s))
                if a is None or b is None or a.status != "ok" or b.status != "ok":
                    continue
                diff = a.metrics[m] - b.metrics[m]
                wins += diff > 0
                losses += diff < 0
                ties += diff == 0
            n = wins + losses
            p = float(stats.binomtest(wins, n, 0.5).pvalue) if n else 1.0
            rows.append({"reference": reference, "other": other, "metric": m, "wins": wins,
                         "losses": losses, "ties": ties, "p_value": p})
    return rows


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
