"""KRDN forward pass, scoring, loss and training loop."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .denoiser import refresh_similarity_bank, relation_means, self_enhance
from .diffcore import ParameterStore, Tape, Var, adam_step, backward, xavier_init
from .graph import InteractionGraph, KnowledgeGraph
from .refiner import MaskSample, disarm_gradient, keep_probability, kg_forward, sample_masks

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_AKR", "no_CDL", "no_AKR_CDL")

# negatives per positive pair and loss margin, per public dataset
DATASET_PRESETS = {
    "alibaba-ifashion": {"negatives": 200, "margin": 0.6},
    "last-fm": {"negatives": 400, "margin": 0.7},
    "yelp2018": {"negatives": 400, "margin": 0.8},
}

CONTINUOUS = ("user_kg", "user_cf", "item_cf", "entity", "relation", "W1", "W2")


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    layers: int = 2
    n_iterations: int = 2
    gamma: float = 0.2
    negatives: int = 200
    margin: float = 0.6
    learning_rate: float = 1e-3
    batch_size: int = 4096
    ablation: str = "full"
    mask_init: float = 0.0
    seed: int = 2023

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.embed_dim < 1 or self.layers < 1 or self.n_iterations < 1:
            raise ConfigError("embed_dim, layers and n_iterations must be >= 1")
        if self.negatives < 1 or self.batch_size < 1:
            raise ConfigError("negatives and batch_size must be >= 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def use_akr(self) -> bool:
        return self.ablation in ("full", "no_CDL")

    @property
    def use_cdl(self) -> bool:
        return self.ablation in ("full", "no_AKR")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Representations:
    """Final (layer-summed) user and item vectors for both views."""

    user_kg: Var
    item_kg: Var
    user_cf: Var
    item_cf: Var
    p_tilde: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    edge_bits: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"user_kg": self.user_kg.value, "item_kg": self.item_kg.value,
                "user_cf": self.user_cf.value, "item_cf": self.item_cf.value}


def init_parameters(config: ModelConfig, ig: InteractionGraph, kg: KnowledgeGraph) -> ParameterStore:
    rng = np.random.default_rng([config.seed, 0])
    d = config.embed_dim
    store = ParameterStore()
    store.add("user_kg", xavier_init((ig.num_users, d), rng=rng))
    store.add("user_cf", xavier_init((ig.num_users, d), rng=rng))
    store.add("item_cf", xavier_init((ig.num_items, d), rng=rng))
    store.add("entity", xavier_init((kg.num_entities, d), rng=rng))
    store.add("relation", xavier_init((max(kg.num_relations, 1), d), rng=rng))
    store.add("W1", xavier_init((d, d), rng=rng))
    store.add("W2", xavier_init((d, d), rng=rng))
    store.add("alpha", np.full(kg.num_triplets, float(config.mask_init)))
    return store


def bind(tape: Tape, store: ParameterStore, differentiable: bool = True) -> dict[str, Var]:
    make = tape.param if differentiable else (lambda name, v: tape.const(v))
    return {name: make(name, store[name]) for name in CONTINUOUS}


def forward(config: ModelConfig, ig: InteractionGraph, kg: KnowledgeGraph,
            params: dict[str, Var], gates, bank: np.ndarray | None = None) -> Representations:
    """Both views for every user and item.

    Knowledge view: entity layers from the gated KG aggregation; at layer l
    users are self-enhanced against the items' layer l-1 knowledge vectors.
    Collaborative view: users are self-enhanced against collaborative item
    vectors, and items are updated with the final-round kept weights of
    their users.  Every view sums its layer outputs 0..L.
    """
    gates = np.ones(kg.num_triplets) if not config.use_akr else np.asarray(gates, dtype=np.float64)
    item_ids = np.arange(ig.num_items)
    _, ent_layers = kg_forward(kg, params["entity"], params["relation"], params["W1"], params["W2"],
                               gates, config.layers, single_facet=not config.use_akr)
    rel_mean = relation_means(kg, params["relation"])
    cdl = config.use_cdl
    uk, uc, ic = params["user_kg"], params["user_cf"], params["item_cf"]
    uk_sum, uc_sum, ic_sum = uk, uc, ic
    ik_sum = dc.gather(ent_layers[0], item_ids)
    res = None
    for layer in range(1, config.layers + 1):
        items_prev = dc.gather(ent_layers[layer - 1], item_ids)
        res = self_enhance(ig, uk, items_prev, rel_mean, uc, ic, config.gamma,
                           rounds=config.n_iterations if cdl else 1,
                           edge_mask=bank if cdl else None, prune=cdl)
        ic_new = dc.l2_normalize(ic + dc.scatter_add(
            dc.scale_rows(res.weights_cf, dc.gather(uc, ig.edge_user)), ig.edge_item, ig.num_items))
        uk, uc, ic = res.user_kg, res.user_cf, ic_new
        uk_sum, uc_sum, ic_sum = uk_sum + uk, uc_sum + uc, ic_sum + ic
        ik_sum = ik_sum + dc.gather(ent_layers[layer], item_ids)
    return Representations(uk_sum, ik_sum, uc_sum, ic_sum, res.p_tilde, res.p_hat, res.bits)


def pair_scores(reps: Representations, users, items) -> Var:
    """``cos(e~_u, e~_i) + cos(e^_u, e^_i)`` for aligned user/item index arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    cf = dc.dot(dc.gather(dc.l2_normalize(reps.user_cf), users), dc.gather(dc.l2_normalize(reps.item_cf), items))
    kgv = dc.dot(dc.gather(dc.l2_normalize(reps.user_kg), users), dc.gather(dc.l2_normalize(reps.item_kg), items))
    return cf + kgv


def predict(reps: Representations, u: int, i: int) -> float:
    return float(pair_scores(reps, [u], [i]).value[0])


def score_matrix(reps: Representations | dict) -> np.ndarray:
    """All-pairs scores, users x items (plain numpy)."""
    arr = reps.arrays() if isinstance(reps, Representations) else reps

    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    return unit(arr["user_cf"]) @ unit(arr["item_cf"]).T + unit(arr["user_kg"]) @ unit(arr["item_kg"]).T


def loss(reps: Representations, users, pos_items, neg_items: np.ndarray,
         pos_mask, margin: float) -> Var:
    """Masked positive ramp plus mean negative ramp, summed over the batch."""
    users = np.asarray(users, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    n_neg = neg_items.shape[1]
    y_pos = pair_scores(reps, users, pos_items)
    pos_term = dc.sum_(dc.max_with_zero(1.0 - y_pos) * np.asarray(pos_mask, dtype=np.float64))
    y_neg = pair_scores(reps, np.repeat(users, n_neg), neg_items.ravel())
    neg_term = dc.sum_(dc.max_with_zero(y_neg - margin)) * (1.0 / n_neg)
    return pos_term + neg_term


def sample_negatives(ig: InteractionGraph, users, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` items per user, uniform with replacement over items absent
    from that user's training edges.  Shape ``(len(users), count)``."""
    users = np.asarray(users, dtype=np.int64)
    deg = ig.user_degree()[users]
    if np.any(deg >= ig.num_items):
        raise ValueError("a user has interacted with every item; no negatives exist")
    keys = ig.edge_keys()
    out = rng.integers(0, ig.num_items, size=(len(users), count))
    base = users[:, None] * ig.num_items
    while True:
        pos = np.searchsorted(keys, base + out)
        hit = (pos < len(keys)) & (keys[np.minimum(pos, len(keys) - 1)] == base + out)
        if not hit.any():
            return out
        out[hit] = rng.integers(0, ig.num_items, size=int(hit.sum()))


@dataclass
class StepReport:
    loss_b: float
    loss_btilde: float
    mask_flips: int
    batch_size: int


class KRDN:
    """Model state: graphs, parameters with optimizer moments, and the
    similarity bank gating positive loss terms."""

    def __init__(self, config: ModelConfig, ig: InteractionGraph, kg: KnowledgeGraph,
                 store: ParameterStore | None = None):
        self.config = config
        self.ig = ig
        self.kg = kg
        self.store = store if store is not None else init_parameters(config, ig, kg)
        self.bank = np.ones(ig.num_edges)
        self.rng = np.random.default_rng([config.seed, 1])
        self.epoch = 0

    # -- inference
    def expected_gates(self) -> np.ndarray:
        if not self.config.use_akr:
            return np.ones(self.kg.num_triplets)
        return keep_probability(self.store["alpha"])

    def representations(self, gates=None) -> Representations:
        tape = Tape()
        params = bind(tape, self.store, differentiable=False)
        return forward(self.config, self.ig, self.kg, params,
                       self.expected_gates() if gates is None else gates, self.bank)

    def refresh_bank(self) -> np.ndarray:
        if not self.config.use_cdl:
            self.bank = np.ones(self.ig.num_edges)
        else:
            reps = self.representations()
            self.bank = refresh_similarity_bank(reps.p_tilde, reps.p_hat, self.config.gamma)
        return self.bank

    # -- training
    def batch_loss(self, edge_ids, negatives, gates, differentiable=True):
        tape = Tape()
        params = bind(tape, self.store, differentiable)
        reps = forward(self.config, self.ig, self.kg, params, gates, self.bank)
        pos_mask = self.bank[edge_ids] if self.config.use_cdl else np.ones(len(edge_ids))
        value = loss(reps, self.ig.edge_user[edge_ids], self.ig.edge_item[edge_ids],
                     negatives, pos_mask, self.config.margin)
        return tape, value

    def train_step(self, edge_ids, sample: MaskSample | None = None) -> StepReport:
        cfg = self.config
        edge_ids = np.asarray(edge_ids, dtype=np.int64)
        if sample is None:
            sample = sample_masks(self.store["alpha"], rng=self.rng)
        negatives = sample_negatives(self.ig, self.ig.edge_user[edge_ids], cfg.negatives, self.rng)
        tape, loss_b = self.batch_loss(edge_ids, negatives, sample.b)
        f_b = float(loss_b.value)
        if not np.isfinite(f_b):
            raise NumericError(f"non-finite loss {f_b} at epoch {self.epoch}, step {self.store.step}")
        grads = backward(tape, loss_b)
        if cfg.use_akr:
            _, loss_bt = self.batch_loss(edge_ids, negatives, sample.b_tilde, differentiable=False)
            f_bt = float(loss_bt.value)
            if not np.isfinite(f_bt):
                raise NumericError(f"non-finite antithetic loss {f_bt} at step {self.store.step}")
            grads["alpha"] = disarm_gradient(f_b, f_bt, sample, self.store["alpha"])
        else:
            f_bt = f_b
            grads["alpha"] = np.zeros_like(self.store["alpha"])
        adam_step(self.store, grads, cfg.learning_rate)
        return StepReport(f_b, f_bt, int(np.sum(sample.b != sample.b_tilde)), len(edge_ids))

    def train_epoch(self) -> dict:
        """One pass over the shuffled training edges, then a bank refresh.

        Returns the deterministic log record for the epoch.
        """
        order = self.rng.permutation(self.ig.num_edges)
        total = 0.0
        for start in range(0, len(order), self.config.batch_size):
            rep = self.train_step(order[start:start + self.config.batch_size])
            total += rep.loss_b
        self.epoch += 1
        self.refresh_bank()
        return {
            "epoch": self.epoch,
            "loss": total,
            "pruned_edges": int(np.sum(self.bank == 0)),
            "mean_keep_probability": float(np.mean(self.expected_gates())) if self.kg.num_triplets else 1.0,
        }

    def fit(self, epochs: int, callback=None) -> list[dict]:
        history = []
        for _ in range(epochs):
            t0 = time.perf_counter()
            record = self.train_epoch()
            history.append(record)
            log.debug("epoch %d loss %.6f (%.2fs)", record["epoch"], record["loss"], time.perf_counter() - t0)
            if callback is not None and callback(self, record) is False:
                break
        return history

    # -- persistence
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.store.names():
            out[f"param/{name}"] = self.store.params[name]
            out[f"adam_m/{name}"] = self.store.m[name]
            out[f"adam_v/{name}"] = self.store.v[name]
        out["bank"] = self.bank
        return out

    def state_metadata(self) -> dict:
        return {"epoch": self.epoch, "adam_step": self.store.step, "config": self.config.to_dict(),
                "config_hash": self.config.digest(), "rng_state": self.rng.bit_generator.state}

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.state_metadata()
        meta.update(extra or {})
        dc.save_tensors(path, self.state_tensors(), meta)

    @classmethod
    def load(cls, path, ig: InteractionGraph, kg: KnowledgeGraph) -> KRDN:
        tensors, meta = dc.load_tensors(path)
        if meta is None:
            raise ValueError(f"{path}: missing metadata sidecar")
        config = ModelConfig.from_dict(meta["config"])
        store = ParameterStore()
        for key, arr in tensors.items():
            if key.startswith("param/"):
                name = key[len("param/"):]
                store.add(name, arr)
                store.m[name] = tensors[f"adam_m/{name}"].copy()
                store.v[name] = tensors[f"adam_v/{name}"].copy()
        store.step = int(meta["adam_step"])
        model = cls(config, ig, kg, store)
        if len(tensors["bank"]) != ig.num_edges:
            raise ValueError(f"{path}: checkpoint bank has {len(tensors['bank'])} edges, graph has {ig.num_edges}")
        if len(store["alpha"]) != kg.num_triplets:
            raise ValueError(f"{path}: checkpoint has {len(store['alpha'])} mask logits, KG has {kg.num_triplets}")
        model.bank = tensors["bank"].copy()
        model.rng.bit_generator.state = meta["rng_state"]
        model.epoch = int(meta["epoch"])
        return model


def ablation_variant(config: ModelConfig, ablation: str) -> ModelConfig:
    from dataclasses import replace

    return replace(config, ablation=ablation)
