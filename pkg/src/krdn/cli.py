"""Command-line entry point: prepare, pollute, train, evaluate, explain, gradcheck.

Configuration comes from three layers, later ones winning: built-in
defaults, an optional flat ``key = value`` file (``--config``), and
command-line flags (``--embed-dim 32`` sets ``embed_dim``).  Every command
writes a ``manifest.json`` holding the fully resolved configuration so the
run can be repeated exactly.

Exit status: 0 on success, 1 on usage or configuration errors (including
missing inputs), 2 on runtime or numeric failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ADJACENCY,
    PAIRS,
    BoundsError,
    Counts,
    DataFormatError,
    NoiseSpec,
    SplitDataset,
    inject_interaction_noise,
    inject_kg_noise,
    load_interactions,
    load_kg,
    split_dataset,
    write_interactions,
    write_kg,
)
from .diffcore import NonFiniteGradient, stable_sigmoid
from .diffcore.checkpoint import CheckpointError
from .evaluation import full_ranking, write_metrics_csv
from .graph import build_indices
from .model import KRDN, ConfigError, ModelConfig, NumericError, score_matrix
from .refiner import keep_probabilities

log = logging.getLogger("krdn")

COMMANDS = ("prepare", "pollute", "train", "evaluate", "explain", "gradcheck")
MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.jsonl"


class UsageError(Exception):
    """Bad flags, bad config values or missing inputs (exit status 1)."""


@dataclass(frozen=True)
class RunConfig:
    # inputs and outputs
    data_dir: str = ""
    interactions: str = ""
    train: str = ""
    valid: str = ""
    test: str = ""
    kg: str = ""
    format: str = ADJACENCY
    output_dir: str = "out"
    checkpoint: str = ""
    # 0 means "infer from the files"
    num_users: int = 0
    num_items: int = 0
    num_entities: int = 0
    num_relations: int = 0
    # splitting
    train_ratio: float = 0.8
    valid_ratio: float = 0.1
    test_ratio: float = 0.1
    split_seed: int = 2023
    # noise
    interaction_noise_rate: float = 0.05
    kg_noise_rate: float = 0.0
    noise_seed: int = 2023
    # model
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
    # training
    epochs: int = 10
    checkpoint_every: int = 0
    resume: bool = False
    # stop after this many epochs without a better validation Recall@20 (0 = off)
    patience: int = 0
    # evaluation
    topk: str = "20"
    eval_split: str = "test"
    # gradient checks
    disarm_samples: int = 100_000
    # 0 means all logical cores
    threads: int = 0

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.interaction_noise_rate, self.kg_noise_rate, self.noise_seed)

    def topk_list(self) -> list[int]:
        try:
            ks = sorted({int(x) for x in self.topk.replace(" ", "").split(",") if x})
        except ValueError:
            raise UsageError(f"topk must be a comma-separated list of integers, got {self.topk!r}") from None
        if not ks or ks[0] < 1:
            raise UsageError(f"topk values must be positive, got {self.topk!r}")
        return ks


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw, source: str):
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise UsageError(f"{source}: {key} expects {kind}, got {raw!r}") from None
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, f"{path}:{lineno}")
    return out


def resolve_config(file_values: dict, flag_values: dict) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    merged = {k: _coerce(k, v, "flag") for k, v in merged.items()}
    cfg = RunConfig(**merged)
    if cfg.format not in (ADJACENCY, PAIRS):
        raise UsageError(f"format must be {ADJACENCY!r} or {PAIRS!r}, got {cfg.format!r}")
    if cfg.eval_split not in ("valid", "test"):
        raise UsageError(f"eval_split must be 'valid' or 'test', got {cfg.eval_split!r}")
    if cfg.epochs < 0 or cfg.checkpoint_every < 0 or cfg.threads < 0:
        raise UsageError("epochs, checkpoint_every and threads must be non-negative")
    try:
        cfg.model_config()
        cfg.noise_spec()
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------- arguments

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="krdn", description="Knowledge-refined denoising recommender.")
    parser.add_argument("--version", action="version", version=f"krdn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                p.add_argument(flag, dest=f.name, default=None, nargs="?", const="true", metavar="BOOL")
            else:
                p.add_argument(flag, dest=f.name, default=None, metavar=f.type.upper())
    return parser


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs: list[str], extra: dict | None = None):
    """Resolved config plus a checksum per output file.  No timestamps, so
    repeated runs produce identical manifests."""
    body = {
        "command": command,
        "version": __version__,
        "config": asdict(cfg),
        "outputs": {name: _sha256(out_dir / name) for name in sorted(outputs)},
    }
    body.update(extra or {})
    (out_dir / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _dir_manifest(cfg: RunConfig) -> dict:
    if not cfg.data_dir:
        return {}
    d = Path(cfg.data_dir)
    if not d.is_dir():
        raise UsageError(f"data_dir not found: {d}")
    m = d / MANIFEST
    return json.loads(m.read_text()) if m.is_file() else {}


def resolve_inputs(cfg: RunConfig) -> dict[str, str]:
    """Split file paths: explicit keys win, then the data directory's
    manifest, then the conventional names inside the data directory."""
    manifest = _dir_manifest(cfg)
    listed = manifest.get("files", {})
    conventional = {"train": "train.txt", "valid": "valid.txt", "test": "test.txt", "kg": "kg_final.txt"}
    out = {}
    for key, default_name in conventional.items():
        explicit = getattr(cfg, key)
        if explicit:
            out[key] = explicit
        elif cfg.data_dir:
            cand = Path(cfg.data_dir) / listed.get(key, default_name)
            out[key] = str(cand) if cand.is_file() else ""
        else:
            out[key] = ""
    return out


def _counts_override(cfg: RunConfig) -> Counts:
    manifest = _dir_manifest(cfg)
    base = manifest.get("counts", {})
    pick = lambda key: getattr(cfg, key) or int(base.get(key, 0))  # noqa: E731
    return Counts(pick("num_users"), pick("num_items"), pick("num_entities"), pick("num_relations"))


def load_split(cfg: RunConfig, need=("train",)) -> tuple[SplitDataset, dict[str, str]]:
    """Load whichever split files exist; those in ``need`` are mandatory."""
    paths = resolve_inputs(cfg)
    for key in need:
        _require(paths[key], f"{key} file")
    fixed = _counts_override(cfg)
    arrays = {}
    n_users, n_items = fixed.num_users, fixed.num_items
    for key in ("train", "valid", "test"):
        if paths[key]:
            arr, c = load_interactions(_require(paths[key], f"{key} file"), cfg.format,
                                       fixed.num_users or None, fixed.num_items or None)
            n_users, n_items = max(n_users, c.num_users), max(n_items, c.num_items)
        else:
            arr = np.zeros((0, 2), dtype=np.int64)
        arrays[key] = arr
    if paths["kg"]:
        kg, kc = load_kg(_require(paths["kg"], "kg file"), fixed.num_entities or None, fixed.num_relations or None)
    else:
        kg, kc = np.zeros((0, 3), dtype=np.int64), Counts()
    n_ent = max(fixed.num_entities, kc.num_entities, n_items)
    n_rel = max(fixed.num_relations, kc.num_relations)
    ds = SplitDataset(arrays["train"], arrays["valid"], arrays["test"], kg, n_users, n_items, n_ent, n_rel)
    return ds, paths


def _counts_dict(ds: SplitDataset) -> dict:
    return asdict(ds.counts)


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_model(cfg: RunConfig, ds: SplitDataset) -> KRDN:
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else None
    if ckpt is None:
        raise UsageError("no checkpoint given")
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    ig, kg = build_indices(ds.train, ds.kg, ds.counts)
    return KRDN.load(ckpt, ig, kg)


# ---------------------------------------------------------------- commands

def cmd_prepare(cfg: RunConfig) -> int:
    src = _require(cfg.interactions, "interactions file")
    fixed = _counts_override(cfg)
    inter, c = load_interactions(src, cfg.format, fixed.num_users or None, fixed.num_items or None)
    if cfg.kg:
        kg, kc = load_kg(_require(cfg.kg, "kg file"), fixed.num_entities or None, fixed.num_relations or None)
    else:
        kg, kc = np.zeros((0, 3), dtype=np.int64), Counts()
    counts = Counts(c.num_users, c.num_items, max(kc.num_entities, c.num_items, fixed.num_entities),
                    max(kc.num_relations, fixed.num_relations))
    try:
        ds = split_dataset(inter, (cfg.train_ratio, cfg.valid_ratio, cfg.test_ratio), cfg.split_seed, kg, counts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(cfg)
    files = {"train": "train.txt", "valid": "valid.txt", "test": "test.txt", "kg": "kg_final.txt"}
    write_interactions(out / files["train"], ds.train, cfg.format)
    write_interactions(out / files["valid"], ds.valid, cfg.format)
    write_interactions(out / files["test"], ds.test, cfg.format)
    write_kg(out / files["kg"], ds.kg)
    sizes = {"train": len(ds.train), "valid": len(ds.valid), "test": len(ds.test), "kg": len(ds.kg)}
    write_manifest(out, "prepare", cfg, list(files.values()),
                   {"files": files, "counts": _counts_dict(ds), "sizes": sizes})
    log.info("prepared %s", sizes)
    return 0


def _polluted_name(path: str, rate: float) -> str:
    p = Path(path)
    return f"{p.stem}.polluted-{rate:g}{p.suffix or '.txt'}"


def cmd_pollute(cfg: RunConfig) -> int:
    ds, paths = load_split(cfg, need=("train", "valid", "test"))
    spec = cfg.noise_spec()
    polluted, replaced = inject_interaction_noise(ds, spec)
    out = _out_dir(cfg)
    rate = spec.interaction_noise_rate
    files = {key: _polluted_name(paths[key], rate) for key in ("train", "valid", "test")}
    write_interactions(out / files["train"], polluted.train, cfg.format)
    write_interactions(out / files["valid"], polluted.valid, cfg.format)
    # test is never polluted: copy the bytes
    shutil.copyfile(paths["test"], out / files["test"])
    kg_rows: list[int] = []
    if paths["kg"]:
        files["kg"] = _polluted_name(paths["kg"], rate)
        if spec.kg_noise_rate > 0:
            kg_new, rows = inject_kg_noise(ds.kg, spec.kg_noise_rate, spec.seed, ds.num_entities)
            write_kg(out / files["kg"], kg_new)
            kg_rows = rows.tolist()
        else:
            shutil.copyfile(paths["kg"], out / files["kg"])
    extra = {
        "files": files,
        "counts": _counts_dict(ds),
        "seed": spec.seed,
        "rate": rate,
        "kg_rate": spec.kg_noise_rate,
        "sizes": {"train": len(ds.train), "valid": len(ds.valid), "test": len(ds.test)},
        "replaced": [r.as_dict() for r in replaced],
        "kg_replaced_rows": kg_rows,
    }
    write_manifest(out, "pollute", cfg, list(files.values()), extra)
    log.info("replaced %d interactions", len(replaced))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds, _ = load_split(cfg)
    ig, kg = build_indices(ds.train, ds.kg, ds.counts)
    out = _out_dir(cfg)
    ckpt, log_path = out / CHECKPOINT, out / TRAIN_LOG
    if cfg.resume:
        if not ckpt.is_file():
            raise UsageError(f"resume requested but no checkpoint at {ckpt}")
        model = KRDN.load(ckpt, ig, kg)
        if model.config != cfg.model_config():
            raise UsageError("resume: checkpoint model config differs from the requested one")
        previous = log_path.read_text().splitlines(keepends=True) if log_path.is_file() else []
        log_lines = previous[:model.epoch]
    else:
        model = KRDN(cfg.model_config(), ig, kg)
        log_lines = []

    def checkpoint():
        model.save(ckpt)
        log_path.write_text("".join(log_lines))

    if cfg.patience and not len(ds.valid):
        raise UsageError("patience needs a non-empty validation split")
    # the stopping state is rebuilt from the log so a resumed run stops where a straight one would
    best, stale = -1.0, 0
    for line in log_lines:
        v = json.loads(line).get("valid_recall@20", -1.0)
        best, stale = (v, 0) if v > best else (best, stale + 1)
    while model.epoch < cfg.epochs and not (cfg.patience and stale >= cfg.patience):
        t0 = time.perf_counter()
        record = model.train_epoch()
        if cfg.patience:
            res = full_ranking(score_matrix(model.representations()), ds.train, ds.valid, (20,))
            record["valid_recall@20"] = res.mean("recall", 20)
            if record["valid_recall@20"] > best:
                best, stale = record["valid_recall@20"], 0
            else:
                stale += 1
        log_lines.append(json.dumps(record, sort_keys=True) + "\n")
        log.info("epoch %d loss %.6f pruned %d (%.2fs)", record["epoch"], record["loss"],
                 record["pruned_edges"], time.perf_counter() - t0)
        if cfg.checkpoint_every and model.epoch % cfg.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    write_manifest(out, "train", cfg, [CHECKPOINT, CHECKPOINT + ".json", TRAIN_LOG],
                   {"counts": _counts_dict(ds), "ablation": cfg.ablation, "epochs_completed": model.epoch})
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    ds, _ = load_split(cfg, need=("train", cfg.eval_split))
    model = _load_model(cfg, ds)
    result = full_ranking(score_matrix(model.representations()), ds.train,
                          getattr(ds, cfg.eval_split), cfg.topk_list())
    out = _out_dir(cfg)
    write_metrics_csv(out / "metrics.csv", result)
    write_manifest(out, "evaluate", cfg, ["metrics.csv"], {"metrics": result.summary()})
    log.info("%s", result.summary())
    return 0


def cmd_explain(cfg: RunConfig) -> int:
    ds, _ = load_split(cfg)
    model = _load_model(cfg, ds)
    out = _out_dir(cfg)
    # without the refining module every triplet is always kept
    alpha = model.store["alpha"] if model.config.use_akr else np.full(model.kg.num_triplets, np.inf)
    rows = keep_probabilities(model.kg, alpha)
    with open(out / "kg_keep.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["triplet_id", "h", "r", "t", "facet", "keep_probability"])
        for row in rows:
            w.writerow([row["triplet_id"], row["h"], row["r"], row["t"], row["facet"], repr(row["keep_probability"])])
    reps = model.representations()
    div = np.abs(stable_sigmoid(reps.p_tilde) - stable_sigmoid(reps.p_hat))
    order = np.lexsort((np.arange(len(div)), -div))
    with open(out / "edge_divergence.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["edge_id", "u", "i", "p_collab", "p_knowledge", "divergence", "kept"])
        for e in order.tolist():
            w.writerow([e, int(model.ig.edge_user[e]), int(model.ig.edge_item[e]), repr(float(reps.p_tilde[e])),
                        repr(float(reps.p_hat[e])), repr(float(div[e])), int(reps.edge_bits[e])])
    write_manifest(out, "explain", cfg, ["kg_keep.tsv", "edge_divergence.tsv"])
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import check_disarm, check_model_gradients, check_primitives, toy_model

    results = [("primitive", r) for r in check_primitives(seed=cfg.seed)]
    results += [("model", r) for r in check_model_gradients(toy_model(seed=cfg.seed), seed=cfg.seed)]
    disarm, _ = check_disarm(samples=cfg.disarm_samples, seed=cfg.seed)
    results.append(("estimator", disarm))
    out = _out_dir(cfg)
    with open(out / "gradcheck.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["group", "name", "error", "tolerance", "status"])
        for group, r in results:
            w.writerow([group, r.name, repr(r.error), repr(r.tolerance), "pass" if r.passed else "FAIL"])
    failed = [f"{g}:{r.name}" for g, r in results if not r.passed]
    write_manifest(out, "gradcheck", cfg, ["gradcheck.tsv"], {"failed": failed})
    for name in failed:
        print(f"gradcheck failed: {name}", file=sys.stderr)
    return 2 if failed else 0


HANDLERS = {
    "prepare": cmd_prepare,
    "pollute": cmd_pollute,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        file_values = read_config_file(args.config) if args.config else {}
        flag_values = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
        cfg = resolve_config(file_values, flag_values)
        threads = cfg.threads or os.cpu_count() or 1
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, BoundsError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
