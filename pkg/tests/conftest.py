import numpy as np
import pytest

from easq.config import RunConfig
from easq.model import EasqConfig, EasqModel
from easq.pipeline import simulate_dataset


def small_config(**kw) -> EasqConfig:
    base = dict(emb_dims=(6, 4, 3), backbone_hidden=8, d_h=6, lora_rank=2, K1=3, K2=2,
                expert_hidden=5, n_users=5, n_items=7, n_categories=3, n_duration_buckets=4)
    base.update(kw)
    return EasqConfig(**base).validate()


def random_feats(cfg: EasqConfig, n: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "user_id": rng.integers(1, cfg.vocab("user_id"), n),
        "item_id": rng.integers(1, cfg.vocab("item_id"), n),
        "item_category": rng.integers(1, cfg.vocab("item_category"), n),
        "hour": rng.integers(1, cfg.vocab("hour"), n),
        "duration_bucket": rng.integers(1, cfg.vocab("duration_bucket"), n),
    }


def perturbed_model(cfg: EasqConfig, seed: int = 1) -> EasqModel:
    """Fresh model with B made nonzero so every pathway carries signal."""
    model = EasqModel.init(cfg)
    if "lora.B" in model.params:
        model.params["lora.B"].values = np.random.default_rng(seed).normal(
            0.0, 0.3, model.params["lora.B"].shape)
    return model


def tiny_run(**sim) -> RunConfig:
    run = RunConfig()
    kw = dict(n_users=8, n_items=40, n_categories=4, n_sessions=60, n_views=16,
              feed_size=32, seed=0)
    kw.update(sim)
    for k, v in kw.items():
        setattr(run.sim, k, v)
    run.model = EasqConfig(emb_dims=(8, 4, 2), backbone_hidden=16, d_h=8, lora_rank=2,
                           K1=3, K2=2, expert_hidden=8, n_duration_buckets=4)
    run.train.batch_size = 32
    run.eval.list_size = 20
    return run.validate()


@pytest.fixture(scope="session")
def tiny_dataset():
    run = tiny_run()
    ds, world = simulate_dataset(run)
    return run, ds, world


# one line per acceptance criterion, printed after the run whatever the outcome
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
