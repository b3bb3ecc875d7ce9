"""Synthetic short-video world with dense behaviour and sparse questionnaires.

True satisfaction depends on user/item affinity and item quality only.
A fraction of "hook" items carries an extra watch-time bias that inflates
engagement without making anyone happier, so a ranker trained purely on
behaviour is measurably misaligned with what the questionnaire reports.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np
from scipy import special, stats

from .errors import ConfigError, InsufficientDataError
from .losses import DISSATISFIED, NONE, SATISFIED, UNCERTAIN, behavior_score

TRIGGER_MIN_WATCH_S = 7.0
TRIGGER_MIN_PROGRESS = 0.5
WATCH_CAP = 1.2

_STREAM_NOISE = 1
_STREAM_SESSION = 2
_STREAM_SCHEDULE = 3


@dataclass(frozen=True)
class QuestionnaireRates:
    exposure: float = 0.005
    response: float = 0.02
    tau_hi: float = 0.7
    tau_lo: float = 0.3
    extremity_bias: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> "QuestionnaireRates":
        for name in ("exposure", "response"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} rate {v} outside [0, 1]")
        if not 0.0 <= self.tau_lo < self.tau_hi <= 1.0:
            raise ConfigError(f"need 0 <= tau_lo < tau_hi <= 1, got {self.tau_lo}, {self.tau_hi}")
        return self


PRESETS = {
    "production": {"exposure_rate": 0.005, "response_rate": 0.02},
    "dense": {"exposure_rate": 0.05, "response_rate": 0.5},
}


@dataclass
class SimConfig:
    preset: str = "dense"
    n_users: int = 200
    n_items: int = 500
    n_categories: int = 16
    d_latent: int = 8
    quality_std: float = 0.3
    noise_std: float = 0.1
    watch_noise_std: float = 0.1
    rho_hook: float = 0.2
    hook_low: float = 0.2
    hook_high: float = 0.5
    duration_low: float = 5.0
    duration_high: float = 120.0
    n_sessions: int = 2000
    n_views: int = 64
    feed_size: int = 128
    session_interval_s: float = 30.0
    exposure_rate: float | None = None
    response_rate: float | None = None
    tau_hi: float = 0.7
    tau_lo: float = 0.3
    extremity_bias: bool = False
    seed: int = 0

    def rates(self) -> QuestionnaireRates:
        try:
            preset = PRESETS[self.preset]
        except KeyError:
            raise ConfigError(f"unknown simulator preset {self.preset!r}") from None
        exposure = preset["exposure_rate"] if self.exposure_rate is None else self.exposure_rate
        response = preset["response_rate"] if self.response_rate is None else self.response_rate
        return QuestionnaireRates(exposure, response, self.tau_hi, self.tau_lo,
                                  self.extremity_bias).validate()

    def validate(self) -> "SimConfig":
        if min(self.n_users, self.n_items, self.n_categories, self.d_latent,
               self.n_views, self.feed_size) < 1 or self.n_sessions < 0:
            raise ConfigError("simulator counts must be >= 1")
        if self.session_interval_s <= 0:
            raise ConfigError("session_interval_s must be positive")
        if not 0.0 <= self.rho_hook <= 1.0:
            raise ConfigError(f"rho_hook {self.rho_hook} outside [0, 1]")
        if self.feed_size > self.n_items:
            raise ConfigError("feed_size exceeds n_items")
        self.rates()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sim keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class World:
    user_latent: np.ndarray
    item_latent: np.ndarray
    quality: np.ndarray
    hook_bias: np.ndarray
    duration: np.ndarray
    category: np.ndarray
    noise_std: float
    seed: int

    @property
    def n_users(self) -> int:
        return len(self.user_latent)

    @property
    def n_items(self) -> int:
        return len(self.item_latent)


@dataclass(frozen=True, slots=True)
class InteractionEvent:
    ts: float
    user_id: int
    item_id: int
    watch_time: float
    duration: float
    progress: float
    like: bool
    follow: bool
    comment: bool
    forward: bool
    s_true: float = float("nan")


@dataclass(frozen=True, slots=True)
class QuestionnaireResponse:
    ts: float
    user_id: int
    item_id: int
    exposed: bool
    clicked: bool
    answer: str = NONE


# -- counter-based noise -----------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, stream: int, a, b) -> np.ndarray:
    """Uniform(0, 1) values addressed by (seed, stream, a, b); no generator state."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix64(np.uint64(seed) * _GOLDEN + np.uint64(stream))
        x = _mix64(key ^ (a * _GOLDEN))
        x = _mix64(x ^ (b * np.uint64(0xD1B54A32D192ED03)))
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def counter_normal(seed: int, stream: int, a, b) -> np.ndarray:
    return special.ndtri(counter_uniform(seed, stream, a, b))


# -- world -----------------------------------------------------------------

def init_world(config: SimConfig, seed: int | None = None) -> World:
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    # per-coordinate variance 1/sqrt(d) keeps the affinity p.q at unit variance
    latent_std = config.d_latent ** -0.25
    users = rng.normal(0.0, latent_std, size=(config.n_users, config.d_latent))
    items = rng.normal(0.0, latent_std, size=(config.n_items, config.d_latent))
    quality = rng.normal(0.0, config.quality_std, size=config.n_items)
    duration = rng.uniform(config.duration_low, config.duration_high, size=config.n_items)
    category = rng.integers(0, config.n_categories, size=config.n_items)
    is_hook = rng.random(config.n_items) < config.rho_hook
    bias = rng.uniform(config.hook_low, config.hook_high, size=config.n_items)
    hook_bias = np.where(is_hook, bias, 0.0)
    return World(users, items, quality, hook_bias, duration, category,
                 config.noise_std, seed)


def true_satisfaction(world: World, user, item) -> np.ndarray:
    """sigmoid(p_u . q_i + g_i + eps_ui); eps_ui is fixed per (user, item)."""
    user = np.asarray(user, dtype=np.int64)
    item = np.asarray(item, dtype=np.int64)
    affinity = np.sum(world.user_latent[user] * world.item_latent[item], axis=-1)
    eps = world.noise_std * counter_normal(world.seed, _STREAM_NOISE, user, item)
    return special.expit(affinity + world.quality[item] + eps)


def simulate_session(world: World, user: int, ranked_items, n_views: int,
                     rng: np.random.Generator, start_ts: float = 0.0,
                     watch_noise_std: float = 0.1) -> list[InteractionEvent]:
    """The user watches the top ``n_views`` items of the feed in order."""
    ranked_items = np.asarray(ranked_items, dtype=np.int64)
    if ranked_items.size == 0:
        raise ValueError("ranked_items is empty")
    items = ranked_items[:n_views]
    n = len(items)
    s = true_satisfaction(world, np.full(n, user), items)
    frac = np.clip(s + world.hook_bias[items] + rng.normal(0.0, watch_noise_std, n),
                   0.0, WATCH_CAP)
    duration = world.duration[items]
    watch = frac * duration
    u = rng.random((4, n))
    like = u[0] < 0.15 * s ** 2
    follow = u[1] < 0.03 * s ** 2
    comment = u[2] < 0.02 * s
    forward = u[3] < 0.01 * s
    ts = start_ts + np.concatenate(([0.0], np.cumsum(watch[:-1] + 1.0)))
    return [InteractionEvent(float(ts[k]), int(user), int(items[k]), float(watch[k]),
                             float(duration[k]), float(watch[k] / duration[k]),
                             bool(like[k]), bool(follow[k]), bool(comment[k]),
                             bool(forward[k]), float(s[k]))
            for k in range(n)]


def questionnaire_trigger(event: InteractionEvent) -> bool:
    return event.watch_time >= TRIGGER_MIN_WATCH_S or event.progress >= TRIGGER_MIN_PROGRESS


def answer_for(s: float, rates: QuestionnaireRates) -> str:
    if s >= rates.tau_hi:
        return SATISFIED
    if s <= rates.tau_lo:
        return DISSATISFIED
    return UNCERTAIN


def questionnaire_respond(world: World, event: InteractionEvent, rates: QuestionnaireRates,
                          rng: np.random.Generator) -> QuestionnaireResponse:
    """Expose, maybe click, and answer from the event's true satisfaction.

    A non-triggered event returns an unexposed response without consuming
    randomness.
    """
    if not questionnaire_trigger(event):
        return QuestionnaireResponse(event.ts, event.user_id, event.item_id, False, False)
    exposed = bool(rng.random() < rates.exposure)
    clicked = False
    s = float("nan")
    if exposed:
        s = float(true_satisfaction(world, event.user_id, event.item_id))
        p_click = rates.response
        if rates.extremity_bias:
            p_click = min(1.0, p_click * 2.0 * abs(2.0 * s - 1.0))
        clicked = bool(rng.random() < p_click)
    answer = answer_for(s, rates) if clicked else NONE
    return QuestionnaireResponse(event.ts, event.user_id, event.item_id, exposed, clicked, answer)


def session_rng(seed: int, session: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SESSION, session]))


def iter_sessions(world: World, config: SimConfig
                  ) -> Iterator[tuple[list[InteractionEvent], list[QuestionnaireResponse]]]:
    """Sessions by start time under a uniformly random logging feed.

    Session ``k`` starts at ``k * session_interval_s``, so with a short
    interval many users are active at once and their views interleave.
    Only exposed questionnaire rows are kept; unexposed ones carry no
    information beyond the interaction itself.
    """
    rates = config.rates()
    schedule = np.random.default_rng(
        np.random.SeedSequence([world.seed, _STREAM_SCHEDULE])
    ).integers(0, world.n_users, size=config.n_sessions)
    for k, user in enumerate(schedule):
        rng = session_rng(world.seed, k)
        feed = rng.choice(world.n_items, size=config.feed_size, replace=False)
        events = simulate_session(world, int(user), feed, config.n_views, rng,
                                  k * config.session_interval_s, config.watch_noise_std)
        responses = []
        for ev in events:
            r = questionnaire_respond(world, ev, rates, rng)
            if r.exposed:
                responses.append(r)
        yield events, responses


def generate_logs(world: World, config: SimConfig
                  ) -> tuple[list[InteractionEvent], list[QuestionnaireResponse]]:
    events: list[InteractionEvent] = []
    responses: list[QuestionnaireResponse] = []
    for ev, resp in iter_sessions(world, config):
        events.extend(ev)
        responses.extend(resp)
    events.sort(key=lambda e: (e.ts, e.user_id, e.item_id))
    responses.sort(key=lambda r: (r.ts, r.user_id, r.item_id))
    return events, responses


def permute_answers(responses: list[QuestionnaireResponse], seed: int
                    ) -> list[QuestionnaireResponse]:
    """Shuffle answers among answered rows: a null with the same label mix."""
    answered = [k for k, r in enumerate(responses) if r.answer != NONE]
    shuffled = np.random.default_rng(seed).permutation(answered)
    out = list(responses)
    for dst, src in zip(answered, shuffled):
        out[dst] = replace(responses[dst], answer=responses[src].answer)
    return out


# -- convergent validity ---------------------------------------------------

@dataclass
class SignalValidity:
    signal: str
    dissatisfied_mean: float
    satisfied_mean: float
    user_average: float
    drop_gap: float
    improve_gap: float
    drop_p: float
    improve_p: float
    n_drop_users: int
    n_improve_users: int


@dataclass
class ValidityReport:
    status: str
    n_satisfied: int = 0
    n_dissatisfied: int = 0
    n_users: int = 0
    signals: list[SignalValidity] = field(default_factory=list)

    def signal(self, name: str) -> SignalValidity:
        return next(s for s in self.signals if s.signal == name)

    def to_dict(self) -> dict:
        return asdict(self)


def _sign_test(diffs: list[float]) -> float:
    pos = sum(d > 0 for d in diffs)
    neg = sum(d < 0 for d in diffs)
    if pos + neg == 0:
        return 1.0
    return float(stats.binomtest(pos, pos + neg, 0.5).pvalue)


def convergent_validity(events: list[InteractionEvent],
                        responses: list[QuestionnaireResponse]) -> ValidityReport:
    """Behaviour on Dissatisfied / Satisfied items against each user's own average."""
    answered = [r for r in responses if r.answer in (SATISFIED, DISSATISFIED, UNCERTAIN)]
    n_sat = sum(r.answer == SATISFIED for r in answered)
    n_dis = sum(r.answer == DISSATISFIED for r in answered)
    if n_sat == 0 or n_dis == 0:
        return ValidityReport("insufficient data", n_sat, n_dis)

    index = {(e.user_id, e.item_id, e.ts): k for k, e in enumerate(events)}
    columns = {
        "watch_fraction": np.array([e.progress for e in events]),
        "like_rate": np.array([float(e.like) for e in events]),
    }
    users = np.array([e.user_id for e in events])
    responders = sorted({r.user_id for r in answered})
    rows_of = {u: np.nonzero(users == u)[0] for u in responders}

    by_answer: dict[str, list[tuple[int, int]]] = {SATISFIED: [], DISSATISFIED: []}
    for r in answered:
        k = index.get((r.user_id, r.item_id, r.ts))
        if k is not None and r.answer in by_answer:
            by_answer[r.answer].append((r.user_id, k))

    report = ValidityReport("ok", n_sat, n_dis, len(responders))
    for name, col in columns.items():
        user_avg = {u: float(col[rows].mean()) for u, rows in rows_of.items()}
        overall_user_avg = float(np.mean(list(user_avg.values())))
        per_user: dict[str, dict[int, list[float]]] = {SATISFIED: {}, DISSATISFIED: {}}
        for ans, hits in by_answer.items():
            for u, k in hits:
                per_user[ans].setdefault(u, []).append(col[k])
        dis_mean = float(np.mean([col[k] for _, k in by_answer[DISSATISFIED]]))
        sat_mean = float(np.mean([col[k] for _, k in by_answer[SATISFIED]]))
        drops = [user_avg[u] - np.mean(v) for u, v in per_user[DISSATISFIED].items()]
        lifts = [np.mean(v) - user_avg[u] for u, v in per_user[SATISFIED].items()]
        report.signals.append(SignalValidity(
            name, dis_mean, sat_mean, overall_user_avg,
            overall_user_avg - dis_mean, sat_mean - overall_user_avg,
            _sign_test(drops), _sign_test(lifts), len(drops), len(lifts)))
    return report


def require_ok(report: ValidityReport) -> ValidityReport:
    if report.status != "ok":
        raise InsufficientDataError("need at least one Satisfied and one Dissatisfied answer")
    return report


def behavior_scores_of(events: list[InteractionEvent]) -> np.ndarray:
    return behavior_score([e.progress for e in events], [e.like for e in events],
                          [e.follow for e in events], [e.comment for e in events],
                          [e.forward for e in events])
