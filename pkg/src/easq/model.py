"""The ranking network: embeddings, backbone, LoRA side pathway and two MoE heads.

Forward composition for a batch of feature rows::

    x       = concat(embeddings)                      # per-field lookups
    h       = l2_normalize(W_0 @ backbone(x))
    h_lora  = B @ (A @ stop_grad(z))                  # z is W_0's input
    h_main  = h + stop_grad(h_lora)                   # main head input
    h_satis = stop_grad(h) + h_lora                   # satisfaction head input
    y_hat   = sum_k R_main(h_main)_k  * FFN_k(h_main)
    s_hat   = sum_k R_satis(h_satis)_k * FFN_k(h_satis)

The fusion stop-gradients keep the dense behavioural loss out of the LoRA
factors and the sparse questionnaire loss out of the backbone, while both
heads see the same fused values in the forward pass. Detaching z closes the
remaining route, since z is itself computed by backbone parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError

ID, CATEGORICAL, DENSE = "id", "categorical", "dense"

# (field name, embedding kind); kind picks the width from EasqConfig.emb_dims
FIELDS: tuple[tuple[str, str], ...] = (
    ("user_id", ID),
    ("item_id", ID),
    ("item_category", CATEGORICAL),
    ("hour", CATEGORICAL),
    ("duration_bucket", DENSE),
)

GROUPS = ("backbone", "lora", "main", "satis")


@dataclass
class EasqConfig:
    emb_dims: tuple[int, int, int] = (64, 32, 8)
    backbone_kind: str = "mlp"
    backbone_hidden: int = 64
    attention_heads: int = 2
    d_h: int = 32
    lora_rank: int = 4
    lora_input: str = "projection"
    use_lora: bool = True
    K1: int = 4
    K2: int = 2
    expert_hidden: int = 32
    router_kind: str = "relu"
    topk: int = 2
    lambda1: float = 0.5
    lambda2: float = 0.5
    beta: float = 0.1
    seed: int = 0
    n_users: int = 200
    n_items: int = 500
    n_categories: int = 16
    n_hours: int = 24
    n_duration_buckets: int = 8

    def __post_init__(self):
        self.emb_dims = tuple(int(d) for d in self.emb_dims)

    def vocab(self, name: str) -> int:
        """Table rows for a field, including the reserved OOV row 0."""
        return {
            "user_id": self.n_users, "item_id": self.n_items,
            "item_category": self.n_categories, "hour": self.n_hours,
            "duration_bucket": self.n_duration_buckets,
        }[name] + 1

    def field_dim(self, kind: str) -> int:
        return self.emb_dims[(ID, CATEGORICAL, DENSE).index(kind)]

    @property
    def input_width(self) -> int:
        return sum(self.field_dim(kind) for _, kind in FIELDS)

    @property
    def lora_in_width(self) -> int:
        if self.lora_input == "embedding":
            return self.input_width
        return self.backbone_hidden

    def validate(self) -> "EasqConfig":
        if len(self.emb_dims) != 3 or min(self.emb_dims) < 1:
            raise ConfigError(f"emb_dims must be three positive ints, got {self.emb_dims}")
        if self.backbone_kind not in ("mlp", "attention"):
            raise ConfigError(f"unknown backbone_kind {self.backbone_kind!r}")
        if self.backbone_kind == "attention" and self.backbone_hidden % self.attention_heads:
            raise ConfigError("backbone_hidden must be divisible by attention_heads")
        if self.router_kind not in ("relu", "topk_softmax", "unit"):
            raise ConfigError(f"unknown router_kind {self.router_kind!r}")
        if self.lora_input not in ("projection", "embedding"):
            raise ConfigError(f"unknown lora_input {self.lora_input!r}")
        if self.K1 < 1 or self.K2 < 1:
            raise ConfigError("K1 and K2 must be >= 1")
        if self.router_kind == "topk_softmax" and not 1 <= self.topk <= min(self.K1, self.K2):
            raise ConfigError(f"topk={self.topk} must lie in [1, min(K1, K2)]")
        if self.router_kind == "unit" and (self.K1 != 1 or self.K2 != 1):
            raise ConfigError("unit routing needs K1 = K2 = 1")
        if self.use_lora and not 1 <= self.lora_rank < min(self.d_h, self.lora_in_width):
            raise ConfigError(
                f"lora_rank={self.lora_rank} must satisfy 1 <= r < min(d_h, k)="
                f"{min(self.d_h, self.lora_in_width)}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if min(self.backbone_hidden, self.d_h, self.expert_hidden) < 1:
            raise ConfigError("layer widths must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["emb_dims"] = list(self.emb_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EasqConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


class Forward(NamedTuple):
    y_hat: Tensor
    s_hat: Tensor
    h: Tensor
    h_lora: Tensor | None
    h_main: Tensor
    h_satis: Tensor
    main_weights: Tensor
    satis_weights: Tensor


def encode_ids(raw, vocab: int) -> np.ndarray:
    """Shift 0-based ids to table rows; anything out of range lands on row 0."""
    raw = np.asarray(raw, dtype=np.int64)
    ok = (raw >= 0) & (raw < vocab - 1)
    return np.where(ok, raw + 1, 0)


@dataclass
class EasqModel:
    config: EasqConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EasqConfig) -> "EasqModel":
        config.validate()
        model = cls(config)
        rng = np.random.default_rng(config.seed)

        def add(group, name, values):
            model.params[name] = dc.parameter(values, name=name)
            model.groups[name] = group

        def gauss(shape, std):
            return rng.normal(0.0, std, size=shape)

        for fname, kind in FIELDS:
            add("backbone", f"emb.{fname}", gauss((config.vocab(fname), config.field_dim(kind)), 1.0))
        k, d = config.backbone_hidden, config.d_h
        if config.backbone_kind == "mlp":
            n_in = config.input_width
            add("backbone", "backbone.W_hidden", gauss((k, n_in), 1.0 / np.sqrt(n_in)))
            add("backbone", "backbone.b_hidden", np.zeros(k))
        else:
            for fname, kind in FIELDS:
                width = config.field_dim(kind)
                add("backbone", f"backbone.proj.{fname}", gauss((k, width), 1.0 / np.sqrt(width)))
            for w in ("Wq", "Wk", "Wv", "Wo"):
                add("backbone", f"backbone.attn.{w}", gauss((k, k), 1.0 / np.sqrt(k)))
        add("backbone", "backbone.W_0", gauss((d, k), 1.0 / np.sqrt(k)))

        if config.use_lora:
            r = config.lora_rank
            add("lora", "lora.A", gauss((r, config.lora_in_width), 1.0 / r))
            add("lora", "lora.B", np.zeros((d, r)))

        for head, n_experts in (("main", config.K1), ("satis", config.K2)):
            if config.router_kind != "unit":
                add(head, f"{head}.W_gate", gauss((n_experts, d), 1.0))
            hid = config.expert_hidden
            for e in range(n_experts):
                add(head, f"{head}.expert{e}.W1", gauss((hid, d), 1.0 / np.sqrt(d)))
                add(head, f"{head}.expert{e}.b1", np.zeros(hid))
                add(head, f"{head}.expert{e}.w2", gauss((1, hid), 1.0 / np.sqrt(hid)))
                add(head, f"{head}.expert{e}.b2", np.zeros(1))
        return model

    def group(self, name: str) -> list[Tensor]:
        return [p for n, p in self.params.items() if self.groups[n] == name]

    def group_names(self, name: str) -> list[str]:
        return [n for n in self.params if self.groups[n] == name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.values.copy() for n, p in self.params.items()}

    def n_params(self, group: str | None = None) -> int:
        return int(np.sum([p.values.size for n, p in self.params.items()
                           if group is None or self.groups[n] == group]))

    # -- components ------------------------------------------------------

    def embed_features(self, feats: dict[str, np.ndarray]) -> list[Tensor]:
        """Per-field embedding rows, in FIELDS order. Rows are OOV-safe table indices."""
        out = []
        for fname, _ in FIELDS:
            table = self.params[f"emb.{fname}"]
            idx = np.asarray(feats[fname], dtype=np.int64)
            idx = np.where((idx >= 0) & (idx < table.shape[0]), idx, 0)
            out.append(dc.take(table, idx))
        return out

    def backbone_trunk(self, field_embs: list[Tensor]) -> Tensor:
        """Features consumed by W_0 (width backbone_hidden)."""
        p = self.params
        if self.config.backbone_kind == "mlp":
            x = dc.concat(field_embs, axis=-1)
            return dc.softplus(dc.affine(p["backbone.W_hidden"], x, p["backbone.b_hidden"]))
        return self._attention(field_embs)

    def _attention(self, field_embs: list[Tensor]) -> Tensor:
        p = self.params
        n = field_embs[0].shape[0]
        dm, heads = self.config.backbone_hidden, self.config.attention_heads
        dk = dm // heads
        tokens = dc.stack([dc.affine(p[f"backbone.proj.{f}"], e)
                           for (f, _), e in zip(FIELDS, field_embs)], axis=1)
        n_tok = tokens.shape[1]

        def split(t):
            return dc.transpose(dc.reshape(t, (n, n_tok, heads, dk)), (0, 2, 1, 3))

        q = split(dc.affine(p["backbone.attn.Wq"], tokens))
        k = split(dc.affine(p["backbone.attn.Wk"], tokens))
        v = split(dc.affine(p["backbone.attn.Wv"], tokens))
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        ctx = dc.matmul(dc.softmax(scores, axis=-1), v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (n, n_tok, dm))
        mixed = dc.add(tokens, dc.affine(p["backbone.attn.Wo"], ctx))
        return dc.mean(mixed, axis=1)

    def backbone_forward(self, trunk: Tensor) -> Tensor:
        return dc.l2_normalize(dc.affine(self.params["backbone.W_0"], trunk), eps=1e-12)

    def lora_forward(self, z: Tensor) -> Tensor:
        """Raw low-rank increment B @ (A @ z); no activation, no scaling."""
        p = self.params
        return dc.affine(p["lora.B"], dc.affine(p["lora.A"], z))

    def route(self, fused: Tensor, head: str) -> Tensor:
        return route(fused, self.params.get(f"{head}.W_gate"), self.config.router_kind,
                     self.config.topk)

    def experts(self, head: str) -> list[tuple[Tensor, Tensor, Tensor, Tensor]]:
        p = self.params
        n = self.config.K1 if head == "main" else self.config.K2
        return [(p[f"{head}.expert{e}.W1"], p[f"{head}.expert{e}.b1"],
                 p[f"{head}.expert{e}.w2"], p[f"{head}.expert{e}.b2"]) for e in range(n)]

    def forward_all(self, feats: dict[str, np.ndarray]) -> Forward:
        embs = self.embed_features(feats)
        trunk = self.backbone_trunk(embs)
        h = self.backbone_forward(trunk)
        if self.config.use_lora:
            z = dc.concat(embs, axis=-1) if self.config.lora_input == "embedding" else trunk
            # z is computed by backbone parameters; detach it so the sparse
            # loss reaches only A and B through this pathway
            h_lora = self.lora_forward(dc.stop_grad(z))
            h_main = fuse(h, h_lora, "main")
            h_satis = fuse(h, h_lora, "satis")
        else:
            h_lora = None
            h_main = h
            h_satis = dc.stop_grad(h)
        w_main = self.route(h_main, "main")
        w_satis = self.route(h_satis, "satis")
        y_hat = moe_forward(h_main, self.experts("main"), w_main)
        s_hat = moe_forward(h_satis, self.experts("satis"), w_satis)
        return Forward(y_hat, s_hat, h, h_lora, h_main, h_satis, w_main, w_satis)

    def predict(self, feats: dict[str, np.ndarray]) -> np.ndarray:
        """Main-head scores only; this is what ranking uses."""
        return self.forward_all(feats).y_hat.values.copy()


def fuse(h: Tensor, h_lora: Tensor, which: str) -> Tensor:
    if which == "main":
        return dc.add(h, dc.stop_grad(h_lora))
    if which == "satis":
        return dc.add(dc.stop_grad(h), h_lora)
    raise ValueError(f"unknown fusion {which!r}")


def route(fused: Tensor, W_gate: Tensor | None, kind: str, topk: int = 1) -> Tensor:
    """Expert weights, shape [..., K].

    ``relu`` keeps every nonnegative gate, so the number of active experts
    varies per row. ``topk_softmax`` zeroes all but the k largest softmax
    entries without renormalising. ``unit`` is the single-expert ablation.
    """
    if kind == "unit":
        return dc.constant(np.ones(fused.shape[:-1] + (1,)))
    logits = dc.affine(W_gate, fused)
    if kind == "relu":
        return dc.relu(logits)
    if kind == "topk_softmax":
        order = np.argsort(-logits.values, axis=-1, kind="stable")
        mask = np.zeros(logits.shape)
        np.put_along_axis(mask, order[..., :topk], 1.0, axis=-1)
        return dc.mul(dc.softmax(logits, axis=-1), mask)
    raise ValueError(f"unknown router kind {kind!r}")


def expert_forward(x: Tensor, W1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    hidden = dc.softplus(dc.affine(W1, x, b1))
    out = dc.affine(w2, hidden, b2)
    return dc.reshape(out, out.shape[:-1])


def moe_forward(fused: Tensor, experts, weights: Tensor) -> Tensor:
    if weights.shape[-1] != len(experts):
        raise ValueError(f"{weights.shape[-1]} router weights for {len(experts)} experts")
    outs = dc.stack([expert_forward(fused, *e) for e in experts], axis=-1)
    return dc.sum(dc.mul(weights, outs), axis=-1)


def active_expert_counts(weights: Tensor) -> np.ndarray:
    return np.count_nonzero(weights.values > 0, axis=-1)
