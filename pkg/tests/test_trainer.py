from dataclasses import replace

import numpy as np
import pytest

from easq import diffcore as dc
from easq.data import log_features
from easq.errors import (CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
                         ConfigError, NumericError)
from easq.losses import NONE
from easq.model import EasqModel
from easq.pipeline import fit_to_data, simulate_dataset, split, variant_config
from easq.trainer import (LOG_COLUMNS, MAGIC, TrainConfig, Trainer, ablation_variant,
                          behavior_only, load_checkpoint, read_manifest, save_checkpoint,
                          train_online, write_train_log)

from conftest import small_config, tiny_run


@pytest.fixture(scope="module")
def setup(tiny_dataset):
    run, ds, _ = tiny_dataset
    run = fit_to_data(run, ds)
    train_log, _ = split(run, ds.log())
    return run, ds, train_log


def make_trainer(run, ds, variant="full", **train):
    cfg = variant_config(run.model, variant)
    tcfg = replace(run.train, ablation=variant if variant != "baseline" else "full", **train)
    return Trainer(EasqModel.init(cfg.validate()), tcfg, ds.catalog)


def groups_unchanged(before, model, groups):
    return all(np.array_equal(before[n], model.params[n].values)
               for n in model.params if model.groups[n] in groups)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(ablation="no_everything").validate()
    with pytest.raises(ConfigError):
        ablation_variant(small_config(), "no_everything")


def test_ablation_variants(setup):
    run, ds, log = setup
    assert EasqModel.init(ablation_variant(run.model, "no_lora")).n_params("lora") == 0
    m = EasqModel.init(ablation_variant(run.model, "no_moe"))
    out = m.forward_all(log_features(m.config, ds.catalog, log.take(slice(0, 9))))
    assert np.array_equal(out.main_weights.values, np.ones((9, 1)))
    assert np.array_equal(out.satis_weights.values, np.ones((9, 1)))
    assert ablation_variant(run.model, "no_dpo").lambda2 == 0.0
    base = behavior_only(run.model)
    assert (base.use_lora, base.lambda1, base.lambda2) == (False, 0.0, 0.0)


def test_no_lora_blocks_satisfaction_gradient_into_backbone(setup):
    run, ds, log = setup
    t = make_trainer(run, ds, "no_lora")
    out = t.model.forward_all(log_features(t.model.config, ds.catalog, log.take(slice(0, 32))))
    dc.backward(dc.sum(out.s_hat))
    assert all(not p.grad.any() for p in t.model.group("backbone"))


def test_baseline_run_leaves_lora_and_satis_bitwise(setup):
    run, ds, log = setup
    model = EasqModel.init(replace(run.model, lambda1=0.0, lambda2=0.0))
    before = model.snapshot()
    t = Trainer(model, run.train, ds.catalog)
    t.fit(log)
    assert groups_unchanged(before, model, ("lora", "satis"))
    assert not groups_unchanged(before, model, ("backbone",))


def test_batch_without_answers_moves_only_main_path(setup):
    run, ds, log = setup
    batch = log.take(slice(0, 32))
    batch.answer = np.full(len(batch), NONE, dtype=object)
    t = make_trainer(run, ds)
    before = t.model.snapshot()
    rec = t.train_step(batch)
    assert rec.loss_satis == 0.0 and rec.loss_dpo == 0.0
    assert rec.n_satis_pairs == rec.n_dpo_pairs == 0
    assert groups_unchanged(before, t.model, ("lora", "satis"))
    assert not groups_unchanged(before, t.model, ("backbone",))
    assert not groups_unchanged(before, t.model, ("main",))


def test_empty_batch_is_skipped(setup):
    run, ds, log = setup
    t = make_trainer(run, ds)
    before = t.model.snapshot()
    assert t.train_step(log.take(slice(0, 0))) is None
    assert t.step == 1 and t.history == []
    assert groups_unchanged(before, t.model, ("backbone", "lora", "main", "satis"))


def test_nan_loss_aborts_with_batch_id(setup):
    run, ds, log = setup
    t = make_trainer(run, ds)
    t.model.params["backbone.W_0"].values[:] = np.nan
    with pytest.raises(NumericError, match="batch 0"):
        t.train_step(log.take(slice(0, 32)))


def test_no_dpo_log_column_is_zero(setup):
    run, ds, log = setup
    t = make_trainer(run, ds, "no_dpo")
    t.fit(log)
    assert all(r.loss_dpo == 0.0 and r.n_dpo_pairs == 0 for r in t.history)
    assert any(r.loss_satis > 0 for r in t.history)


def test_single_pass_step_count(setup):
    run, ds, log = setup
    _, history = train_online(log, EasqModel.init(run.model), run.train, ds.catalog)
    assert len(history) == -(-len(log) // run.train.batch_size)
    assert [r.step for r in history] == list(range(len(history)))


def test_train_log_header(setup, tmp_path):
    run, ds, log = setup
    t = make_trainer(run, ds)
    t.fit(log, max_steps=3)
    write_train_log(tmp_path / "log.csv", t.history)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert lines[0] == "step,loss_main,loss_satis,loss_dpo,n_behavior_pairs,n_satis_pairs,n_dpo_pairs"
    assert len(lines) == 4


def test_replay_memory_pairs_answers_across_batches(setup):
    run, ds, log = setup
    t = make_trainer(run, ds, replay_buffer_size=64, replay_per_batch=8, answer_memory=8)
    t.fit(log)
    assert len(t.replay) > 0
    for p in t.replay:
        assert p.item_pos != p.item_neg and p.margin > 0
    assert any(r.n_satis_pairs > 0 for r in t.history)


# -- checkpoints ------------------------------------------------------------------

def test_save_load_save_is_byte_identical(setup, tmp_path):
    run, ds, log = setup
    t = make_trainer(run, ds, replay_buffer_size=32, replay_per_batch=4)
    t.fit(log, max_steps=4)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, t)
    loaded = load_checkpoint(a, ds.catalog)
    save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    for n, p in t.model.params.items():
        assert np.array_equal(p.values, loaded.model.params[n].values)
        assert np.array_equal(t.optimizer.state.first_moment[n],
                              loaded.optimizer.state.first_moment[n])
        assert np.array_equal(t.optimizer.state.second_moment[n],
                              loaded.optimizer.state.second_moment[n])


def test_identical_runs_give_identical_checkpoints(setup, tmp_path):
    run, ds, log = setup
    for name in ("a", "b"):
        t = make_trainer(run, ds)
        t.fit(log)
        save_checkpoint(tmp_path / f"{name}.ckpt", t)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_equals_uninterrupted(setup, tmp_path):
    run, ds, log = setup
    kw = dict(replay_buffer_size=64, replay_per_batch=8, answer_memory=8)
    whole = make_trainer(run, ds, **kw)
    whole.fit(log)
    save_checkpoint(tmp_path / "whole.ckpt", whole)

    first = make_trainer(run, ds, **kw)
    first.fit(log, max_steps=3)
    save_checkpoint(tmp_path / "mid.ckpt", first)
    resumed = load_checkpoint(tmp_path / "mid.ckpt", ds.catalog)
    resumed.fit(log)
    save_checkpoint(tmp_path / "resumed.ckpt", resumed)
    assert (tmp_path / "whole.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()


def test_checkpoint_errors(setup, tmp_path):
    run, ds, log = setup
    t = make_trainer(run, ds)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, t)
    raw = path.read_bytes()

    (tmp_path / "short.ckpt").write_bytes(raw[:-16])
    with pytest.raises(CheckpointTruncatedError):
        read_manifest(tmp_path / "short.ckpt")
    (tmp_path / "tiny.ckpt").write_bytes(raw[:5])
    with pytest.raises(CheckpointTruncatedError):
        read_manifest(tmp_path / "tiny.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointVersionError):
        read_manifest(tmp_path / "magic.ckpt")
    bumped = raw.replace(b'"format_version":1', b'"format_version":9', 1)
    (tmp_path / "v9.ckpt").write_bytes(bumped)
    with pytest.raises(CheckpointVersionError, match="9"):
        read_manifest(tmp_path / "v9.ckpt")

    other = replace(run.model, d_h=run.model.d_h + 2)
    with pytest.raises(CheckpointShapeError, match="emb|backbone"):
        load_checkpoint(path, ds.catalog, into=other)
    assert raw.startswith(MAGIC)


def test_shape_error_names_first_offending_entry(setup, tmp_path):
    run, ds, _ = setup
    t = make_trainer(run, ds)
    save_checkpoint(tmp_path / "c.ckpt", t)
    other = replace(run.model, expert_hidden=run.model.expert_hidden + 1)
    with pytest.raises(CheckpointShapeError, match="'main.expert0.W1'"):
        load_checkpoint(tmp_path / "c.ckpt", ds.catalog, into=other)


def test_dense_world_main_loss_decreases():
    run = tiny_run(n_users=20, n_items=80, n_sessions=300, n_views=32, feed_size=64)
    ds, _ = simulate_dataset(run)
    run = fit_to_data(run, ds)
    train_log, _ = split(run, ds.log())
    t = make_trainer(run, ds)
    t.fit(train_log)
    losses = np.array([r.loss_main for r in t.history])
    k = max(1, len(losses) // 10)
    assert losses[-k:].mean() < losses[:k].mean()
