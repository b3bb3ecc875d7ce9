"""Single-pass online training, ablation variants and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .data import Catalog, EventLog, batches, encode_features, log_features
from .diffcore import Adam, AdamState
from .errors import (CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
                     ConfigError, NumericError)
from .losses import (LABEL_VALUE, PreferencePair, behavior_pair_rows, build_satis_pairs,
                     dpo_loss, pairwise_logistic, satis_loss, total_loss)
from .model import EasqConfig, EasqModel

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_lora", "no_moe", "no_dpo")
LOG_COLUMNS = ("step", "loss_main", "loss_satis", "loss_dpo",
               "n_behavior_pairs", "n_satis_pairs", "n_dpo_pairs")


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 1
    steps: int | None = None
    lr: float = 1e-3
    ablation: str = "full"
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    replay_buffer_size: int = 0
    replay_per_batch: int = 16
    answer_memory: int = 32
    max_behavior_pairs: int = 1024
    dpo_include_uncertain: bool = False

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.replay_buffer_size < 0 or self.replay_per_batch < 0 or self.answer_memory < 0:
            raise ConfigError("replay sizes must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def ablation_variant(config: EasqConfig, variant: str) -> EasqConfig:
    """Model config with one component removed."""
    if variant == "full":
        return replace(config)
    if variant == "no_lora":
        return replace(config, use_lora=False)
    if variant == "no_moe":
        return replace(config, K1=1, K2=1, router_kind="unit")
    if variant == "no_dpo":
        return replace(config, lambda2=0.0)
    raise ConfigError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")


def behavior_only(config: EasqConfig) -> EasqConfig:
    """The baseline: no LoRA, and neither questionnaire loss is used."""
    return replace(config, use_lora=False, lambda1=0.0, lambda2=0.0)


@dataclass
class StepRecord:
    step: int
    loss_main: float
    loss_satis: float
    loss_dpo: float
    n_behavior_pairs: int
    n_satis_pairs: int
    n_dpo_pairs: int

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass(frozen=True)
class ReplayPair:
    user: int
    item_pos: int
    ts_pos: float
    item_neg: int
    ts_neg: float
    margin: float


def batch_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


@dataclass
class Trainer:
    model: EasqModel
    config: TrainConfig
    catalog: Catalog
    optimizer: Adam = None
    step: int = 0
    history: list[StepRecord] = field(default_factory=list)
    replay: deque = None
    answers: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        if self.optimizer is None:
            self.optimizer = Adam(self.model.params, lr=self.config.lr)
        if self.replay is None:
            self.replay = deque(maxlen=max(self.config.replay_buffer_size, 1))

    def _replayed(self, step: int) -> list[ReplayPair]:
        if self.config.replay_buffer_size == 0 or not self.replay:
            return []
        pool = list(self.replay)
        k = min(self.config.replay_per_batch, len(pool))
        pick = np.random.default_rng(batch_seed(self.config.seed ^ 0x5EED, step)).choice(
            len(pool), size=k, replace=False)
        return [pool[i] for i in np.sort(pick)]

    def train_step(self, batch: EventLog) -> StepRecord | None:
        """Forward both heads, build pairs, one backward, one Adam step."""
        step = self.step
        self.step += 1
        if len(batch) == 0:
            log.info("step %d: empty batch skipped", step)
            return None
        mcfg = self.model.config
        feats = log_features(mcfg, self.catalog, batch)
        replayed = self._replayed(step)
        n = len(batch)
        if replayed:
            users = [p.user for p in replayed for _ in (0, 1)]
            items = [it for p in replayed for it in (p.item_pos, p.item_neg)]
            ts = [t for p in replayed for t in (p.ts_pos, p.ts_neg)]
            extra = encode_features(mcfg, self.catalog, users, items, ts)
            feats = {k: np.concatenate([feats[k], extra[k]]) for k in feats}

        out = self.model.forward_all(feats)
        behavior = behavior_pair_rows(batch.user, batch.item, batch.behavior(),
                                      self.config.max_behavior_pairs,
                                      seed=batch_seed(self.config.seed, step))
        satis, dpo = build_satis_pairs(batch.user, batch.item, batch.answer,
                                       self.config.dpo_include_uncertain)
        fresh = list(satis)
        for k, p in enumerate(replayed):
            pair = PreferencePair(p.user, p.item_pos, p.item_neg, "questionnaire", p.margin,
                                  n + 2 * k, n + 2 * k + 1)
            satis.append(pair)
            if p.margin == 1.0 or self.config.dpo_include_uncertain:
                dpo.append(pair)

        l_main = pairwise_logistic(*behavior, out.y_hat)
        l_satis = satis_loss(satis, out.s_hat) if mcfg.lambda1 > 0 else None
        l_dpo = dpo_loss(dpo, out.y_hat, out.s_hat, mcfg.beta) if mcfg.lambda2 > 0 else None
        loss = total_loss(l_main, l_satis, l_dpo, mcfg.lambda1, mcfg.lambda2)
        if not np.isfinite(loss.values).all():
            raise NumericError(f"non-finite loss at batch {step}")

        self.optimizer.zero_grad()
        dc.backward(loss)
        self.optimizer.step()

        for p in fresh:
            self.replay_push(ReplayPair(p.user_id, p.item_pos, float(batch.ts[p.pos_row]),
                                        p.item_neg, float(batch.ts[p.neg_row]), p.margin_label))
        self._remember_answers(batch)
        record = StepRecord(step, l_main.item(),
                            l_satis.item() if l_satis is not None else 0.0,
                            l_dpo.item() if l_dpo is not None else 0.0,
                            len(behavior[0]), len(satis), len(dpo) if mcfg.lambda2 > 0 else 0)
        self.history.append(record)
        return record

    def replay_push(self, pair: ReplayPair) -> None:
        if self.config.replay_buffer_size > 0:
            self.replay.append(pair)

    def _remember_answers(self, batch: EventLog) -> None:
        """Pair each new answer with the same user's earlier answers, then store it.

        Questionnaire answers rarely share a batch, so without this memory the
        replay buffer would stay almost empty.
        """
        if self.config.replay_buffer_size == 0 or self.config.answer_memory == 0:
            return
        for k in np.nonzero(np.isin(batch.answer, list(LABEL_VALUE)))[0]:
            u, item, ts = int(batch.user[k]), int(batch.item[k]), float(batch.ts[k])
            label = LABEL_VALUE[batch.answer[k]]
            memory = self.answers.setdefault(u, deque(maxlen=self.config.answer_memory))
            for old_item, old_ts, old_label in memory:
                if old_item == item or old_label == label:
                    continue
                if label > old_label:
                    self.replay_push(ReplayPair(u, item, ts, old_item, old_ts, label - old_label))
                else:
                    self.replay_push(ReplayPair(u, old_item, old_ts, item, ts, old_label - label))
            memory.append((item, ts, label))

    def fit(self, log_: EventLog, max_steps: int | None = None,
            on_step=None) -> list[StepRecord]:
        """Consume the stream once per epoch, resuming from ``self.step``."""
        per_epoch = -(-len(log_) // self.config.batch_size)
        total = per_epoch * self.config.epochs
        if self.config.steps is not None:
            total = min(total, self.config.steps)
        if max_steps is not None:
            total = min(total, max_steps)
        while self.step < total:
            start = (self.step % per_epoch) * self.config.batch_size
            self.train_step(log_.take(slice(start, start + self.config.batch_size)))
            if on_step is not None:
                on_step(self)
        return self.history


def train_online(log_: EventLog, model: EasqModel, config: TrainConfig,
                 catalog: Catalog) -> tuple[EasqModel, list[StepRecord]]:
    trainer = Trainer(model, config, catalog)
    trainer.fit(log_)
    return model, trainer.history


def write_train_log(path: Path, records: Iterable[StepRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.row()))
            fh.write("\n")


# -- checkpoints -------------------------------------------------------------

MAGIC = b"EASQCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sQ")


def save_checkpoint(path: Path, trainer: Trainer) -> None:
    """Header, JSON manifest, then a little-endian float64 payload.

    Payload order: every parameter, then Adam first moments, then second
    moments, each in parameter order. Offsets in the manifest are relative
    to the start of the payload.
    """
    model, state = trainer.model, trainer.optimizer.state
    entries, chunks, offset = [], [], 0
    for kind, source in (("param", {n: p.values for n, p in model.params.items()}),
                         ("adam_m", state.first_moment), ("adam_v", state.second_moment)):
        for name in model.params:
            arr = np.ascontiguousarray(source[name], dtype="<f8")
            entries.append({"kind": kind, "name": name, "group": model.groups[name],
                            "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": trainer.config.to_dict(),
        "step": trainer.step,
        "adam": {"step_count": state.step_count, "lr": state.lr, "beta1": state.beta1,
                 "beta2": state.beta2, "eps": state.eps},
        "replay": [asdict(p) for p in trainer.replay] if trainer.config.replay_buffer_size else [],
        "answers": {str(u): [list(a) for a in mem] for u, mem in trainer.answers.items()},
        "history": [r.row() for r in trainer.history],
        "entries": entries,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_manifest(path: Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    magic, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < _HEADER.size + n:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    manifest = json.loads(raw[_HEADER.size:_HEADER.size + n])
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {manifest.get('format_version')} unsupported "
            f"(expected {FORMAT_VERSION})")
    payload = raw[_HEADER.size + n:]
    if len(payload) < manifest["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, manifest needs {manifest['payload_bytes']}")
    return manifest, payload


def load_checkpoint(path: Path, catalog: Catalog, into: EasqConfig | None = None) -> Trainer:
    """Rebuild model, optimizer and stream position.

    With ``into`` given, the stored tensors must fit a model built from that
    config; the first entry that does not is named in the error.
    """
    manifest, payload = read_manifest(path)
    stored_cfg = EasqConfig.from_dict({**manifest["model_config"],
                                       "emb_dims": tuple(manifest["model_config"]["emb_dims"])})
    model = EasqModel.init(into if into is not None else stored_cfg)
    train_cfg = TrainConfig.from_dict(manifest["train_config"])
    adam = manifest["adam"]
    state = AdamState(lr=adam["lr"], beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"],
                      step_count=adam["step_count"])
    seen = set()
    for e in manifest["entries"]:
        name, shape = e["name"], tuple(e["shape"])
        if name not in model.params or model.params[name].shape != shape:
            have = model.params[name].shape if name in model.params else "absent"
            raise CheckpointShapeError(f"entry {name!r} ({e['kind']}) has shape {shape}, "
                                       f"model expects {have}")
        arr = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)) if shape else 1,
                            offset=e["offset"]).reshape(shape).astype(np.float64)
        if e["kind"] == "param":
            model.params[name].values = arr.copy()
            model.params[name].zero_grad()
            seen.add(name)
        elif e["kind"] == "adam_m":
            state.first_moment[name] = arr.copy()
        else:
            state.second_moment[name] = arr.copy()
    missing = [n for n in model.params if n not in seen]
    if missing:
        raise CheckpointShapeError(f"entry {missing[0]!r} missing from checkpoint")
    optimizer = Adam(model.params, lr=state.lr)
    optimizer.state = state
    trainer = Trainer(model, train_cfg, catalog, optimizer=optimizer, step=manifest["step"])
    for p in manifest["replay"]:
        trainer.replay.append(ReplayPair(**p))
    trainer.history = [StepRecord(*row) for row in manifest.get("history", [])]
    for u, mem in manifest.get("answers", {}).items():
        trainer.answers[int(u)] = deque(((int(i), float(t), float(y)) for i, t, y in mem),
                                        maxlen=train_cfg.answer_memory)
    return trainer
