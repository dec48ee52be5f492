"""Command-line orchestration: staged runs from corpus to evaluation report.

Every stage reads a flat key=value config, validates its upstream artifacts
by embedded config hash, and writes deterministic outputs under the run
directory. Wall-clock measurements go to sidecar files under timing/, which
is the one subtree excluded from byte-for-byte reproducibility.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import clusterer, corpus, ensemble, gradfeat, model, router, store, trainer
from .adapters import init_lora, load_adapter, merge_weighted, save_adapter

METHODS = (
    "base",
    "elrea",
    "moe-routing",
    "moe-merging",
    "mole",
    "lora-ens",
    "self-consistency",
    "random-cluster",
    "uniform",
)

# fields that name filesystem locations; they never enter the config hash or
# the config snapshot, so runs in different directories stay byte-identical
PATH_FIELDS = ("run_dir", "corpus_train", "corpus_test")

SEED_FIELDS = (
    "seed_data",
    "seed_init",
    "seed_shuffle",
    "seed_projection",
    "seed_cluster",
    "seed_consistency",
    "seed_tie",
)


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    run_dir: str = ""
    corpus_train: str = ""  # default: <run_dir>/corpus/train.jsonl
    corpus_test: str = ""
    synth_train: str = "add:1000,reverse:1000,sort:1000,copy:1000"
    synth_test: str = "add:100,reverse:100,sort:100,copy:100"

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 256
    ln_eps: float = 1e-5

    r: int = 8
    alpha: float = 0.0  # 0 -> 4r
    dropout: float = 0.1

    epochs: int = 2
    batch: int = 16
    eta_base: float = 5e-5
    expert_epochs: int = 0  # 0 -> epochs
    expert_batch: int = 0  # 0 -> batch
    eta_expert: float = 2e-5

    d_proj: int = 8192
    feature_batch: int = 512

    sample_cap: int = 5000
    k_initial: int = 5
    birch_threshold: float = 0.5
    birch_branching: int = 50
    rebalance_ratio: float = 5.0
    rebalance_max_iter: int = 3

    max_new_tokens: int = 64
    top_k: int = 0  # 0 -> all experts

    n_extra_adapters: int = 3
    mole_epochs: int = 1
    mole_lr: float = 2e-5
    mole_batch: int = 0  # 0 -> batch
    sc_samples: int = 5
    sc_temperature: float = 1.0
    baselines: str = ""  # comma list run by the all command

    seed: int = 1
    seed_data: int = -1  # -1 -> derived from seed
    seed_init: int = -1
    seed_shuffle: int = -1
    seed_projection: int = -1
    seed_cluster: int = -1
    seed_consistency: int = -1
    seed_tie: int = -1


def _derive_seed(master, name):
    tag = zlib.crc32(name.encode())
    return int(np.random.default_rng([master, tag]).integers(2**31))


def parse_config(path, overrides=None):
    """Flat key=value file with '#' comments; types follow the field types.

    overrides: mapping applied after the file (the CLI flags).
    """
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    cfg = PipelineConfig()
    seen = set()
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise PipelineError(f"cannot read config {path}: {e}") from e
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PipelineError(f"{path}:{n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise PipelineError(f"{path}:{n}: unknown key {key!r}")
        if key in seen:
            raise PipelineError(f"{path}:{n}: duplicate key {key!r}")
        seen.add(key)
        kind = fields[key].type
        try:
            if kind == "int":
                setattr(cfg, key, int(value))
            elif kind == "float":
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError as e:
            raise PipelineError(f"{path}:{n}: bad value for {key}: {e}") from e
    for key, value in (overrides or {}).items():
        setattr(cfg, key, value)
    env_dir = os.environ.get("ELREA_RUN_DIR")
    if env_dir:
        cfg.run_dir = env_dir
    if not cfg.run_dir:
        raise PipelineError("run_dir is required (config key or ELREA_RUN_DIR)")
    for name in SEED_FIELDS:
        if getattr(cfg, name) < 0:
            setattr(cfg, name, _derive_seed(cfg.seed, name))
    if not cfg.corpus_train:
        cfg.corpus_train = os.path.join(cfg.run_dir, "corpus", "train.jsonl")
    if not cfg.corpus_test:
        cfg.corpus_test = os.path.join(cfg.run_dir, "corpus", "test.jsonl")
    return cfg


def config_hash(cfg):
    lines = [
        f"{f.name}={getattr(cfg, f.name)!r}"
        for f in dataclasses.fields(PipelineConfig)
        if f.name not in PATH_FIELDS
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def write_config_snapshot(cfg):
    lines = ["# resolved configuration; path fields omitted by design"]
    for f in sorted(dataclasses.fields(PipelineConfig), key=lambda f: f.name):
        if f.name not in PATH_FIELDS:
            lines.append(f"{f.name}={getattr(cfg, f.name)}")
    lines.append(f"config_hash={config_hash(cfg)}")
    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def lm_config(cfg):
    return model.LmConfig(
        vocab_size=len(corpus.Vocab().symbols),
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        max_len=cfg.max_len,
        ln_eps=cfg.ln_eps,
    )


# --- stage plumbing ------------------------------------------------------


def _p(cfg, *parts):
    return os.path.join(cfg.run_dir, *parts)


def _require(path, producing_stage, cfg):
    if not os.path.exists(path):
        raise PipelineError(
            f"missing {path}; run `elrea {producing_stage} --config <config>` first"
        )


def _seed_record(cfg):
    record = {"seed": cfg.seed}
    for name in SEED_FIELDS:
        record[name] = getattr(cfg, name)
    return record


def _write_stage_meta(cfg, stage_dir, **extra):
    os.makedirs(stage_dir, exist_ok=True)
    payload = {"config_hash": config_hash(cfg), "seeds": _seed_record(cfg)}
    payload.update(extra)
    store.write_json(os.path.join(stage_dir, "stage.json"), payload)


def _check_stage(cfg, stage_dir, producing_stage):
    path = os.path.join(stage_dir, "stage.json")
    _require(path, producing_stage, cfg)
    meta = store.read_json(path)
    if meta.get("config_hash") != config_hash(cfg):
        raise PipelineError(
            f"{path} was produced under a different configuration; "
            f"rerun `elrea {producing_stage}` with the current config"
        )
    return meta


class StageTimer:
    """Wall-clock sidecar under timing/; not part of the artifact set.
    Entries added to .extra before exit land in the sidecar, for stages
    whose time splits into separately reported parts."""

    def __init__(self, cfg, stage):
        self.cfg = cfg
        self.stage = stage
        self.extra = {}

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        seconds = time.perf_counter() - self.t0
        out_dir = _p(self.cfg, "timing")
        os.makedirs(out_dir, exist_ok=True)
        record = {
            "stage": self.stage,
            "seconds": seconds,
            "config_hash": config_hash(self.cfg),
        }
        record.update(self.extra)
        store.write_json(os.path.join(out_dir, f"{self.stage}.json"), record)
        return False


def _read_stage_timing(cfg, stage):
    path = _p(cfg, "timing", f"{stage}.json")
    if not os.path.exists(path):
        return None
    return store.read_json(path)


def _read_stage_seconds(cfg, stage):
    record = _read_stage_timing(cfg, stage)
    return None if record is None else float(record["seconds"])


# --- corpus handling -----------------------------------------------------


def _parse_mix(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        tag, _, count = part.partition(":")
        if tag.strip() not in corpus.FAMILIES:
            raise PipelineError(f"unknown task family {tag.strip()!r}")
        try:
            out.append((tag.strip(), int(count)))
        except ValueError as e:
            raise PipelineError(f"bad mix entry {part!r}: {e}") from e
    if not out:
        raise PipelineError(f"empty task mix {text!r}")
    return out


def ensure_corpus(cfg):
    """Synthesize the configured corpus files when they are absent."""
    vocab = corpus.Vocab()
    made = False
    for path, mix_text, split in (
        (cfg.corpus_train, cfg.synth_train, "train"),
        (cfg.corpus_test, cfg.synth_test, "test"),
    ):
        if os.path.exists(path):
            continue
        if not mix_text:
            raise PipelineError(
                f"{path} does not exist and no synthetic mix is configured"
            )
        seed = _derive_seed(cfg.seed_data, split)
        examples = corpus.synth_generate(_parse_mix(mix_text), seed)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        corpus.save_jsonl(path, examples)
        made = True
    if made or not os.path.exists(_p(cfg, "corpus", "vocab.txt")):
        os.makedirs(_p(cfg, "corpus"), exist_ok=True)
        vocab.save(_p(cfg, "corpus", "vocab.txt"))


def _load_split(cfg, path):
    vocab = corpus.Vocab()
    examples = corpus.load_jsonl(path)
    seqs = [corpus.tokenize(e, vocab, max_len=cfg.max_len) for e in examples]
    return examples, seqs


# --- stages --------------------------------------------------------------


def cmd_train_base(cfg):
    write_config_snapshot(cfg)
    ensure_corpus(cfg)
    _, seqs = _load_split(cfg, cfg.corpus_train)
    with StageTimer(cfg, "train-base"):
        config = lm_config(cfg)
        backbone = model.init_backbone(config, seed=cfg.seed_init)
        model.save_backbone(
            _p(cfg, "backbone.ckpt"), backbone,
            meta={"config_hash": config_hash(cfg)},
        )
        adapter = init_lora(
            config, cfg.r, _derive_seed(cfg.seed_init, "base-adapter"),
            alpha=cfg.alpha or None, dropout_p=cfg.dropout,
        )
        run = trainer.train(
            backbone, adapter, seqs,
            epochs=cfg.epochs, eta0=cfg.eta_base, batch=cfg.batch,
            seed=cfg.seed_shuffle, run_dir=_p(cfg, "base"),
        )
    _write_stage_meta(
        cfg, _p(cfg, "base"),
        n_train=len(seqs), epoch_losses=run.epoch_losses,
    )
    return run


def _load_backbone_checked(cfg):
    _require(_p(cfg, "backbone.ckpt"), "train-base", cfg)
    backbone, meta = model.load_backbone(_p(cfg, "backbone.ckpt"))
    if meta.get("config_hash") != config_hash(cfg):
        raise PipelineError(
            "backbone.ckpt was produced under a different configuration; "
            "rerun `elrea train-base` with the current config"
        )
    return backbone


def _load_base_run(cfg):
    _check_stage(cfg, _p(cfg, "base"), "train-base")
    return trainer.load_run(_p(cfg, "base"), cfg.epochs)


def _projection_spec(cfg, run):
    return gradfeat.ProjectionSpec(
        seed=cfg.seed_projection, d_proj=cfg.d_proj,
        source_dim=run.adapters[-1].n_params,
    )


def cmd_grad_features(cfg):
    """Training-split direction features, the fine-tuning-side gradient pass.

    Test instructions get their features during the route stage instead:
    that pass is inference cost, not fine-tuning cost, and the timing table
    accounts for the two separately."""
    backbone = _load_backbone_checked(cfg)
    run = _load_base_run(cfg)
    _, train_seqs = _load_split(cfg, cfg.corpus_train)
    spec = _projection_spec(cfg, run)
    os.makedirs(_p(cfg, "features"), exist_ok=True)
    with StageTimer(cfg, "grad-features"):
        gradfeat.build_feature_matrix(
            backbone, train_seqs, run, spec,
            out_path=_p(cfg, "features", "train.features"),
            batch_size=cfg.feature_batch,
        )
    _write_stage_meta(
        cfg, _p(cfg, "features"),
        d_proj=cfg.d_proj, source_dim=spec.source_dim,
        n_train=len(train_seqs),
    )


def _load_train_features(cfg):
    _check_stage(cfg, _p(cfg, "features"), "grad-features")
    return gradfeat.load_feature_matrix(_p(cfg, "features", "train.features"))


def cmd_cluster(cfg):
    features = _load_train_features(cfg)
    train_examples, _ = _load_split(cfg, cfg.corpus_train)
    with StageTimer(cfg, "cluster"):
        params = clusterer.BirchParams(
            threshold=cfg.birch_threshold,
            branching=cfg.birch_branching,
            k=cfg.k_initial,
        )
        cmodel = clusterer.birch_fit(
            features, sample_cap=cfg.sample_cap, params=params,
            seed=cfg.seed_cluster,
        )
        clusterer.rebalance(
            cmodel, features,
            max_iter=cfg.rebalance_max_iter, ratio=cfg.rebalance_ratio,
        )
        clusterer.save_cluster_model(_p(cfg, "clusters"), cmodel)
        clusterer.write_report_csv(
            _p(cfg, "clusters", "report.csv"), cmodel, train_examples
        )
    _write_stage_meta(
        cfg, _p(cfg, "clusters"),
        n_clusters=cmodel.n_clusters, sizes=cmodel.sizes,
        history_len=len(cmodel.history),
    )
    return cmodel


def _load_clusters(cfg):
    _check_stage(cfg, _p(cfg, "clusters"), "cluster")
    return clusterer.load_cluster_model(_p(cfg, "clusters"))


def _train_cluster_experts(cfg, backbone, base_adapter, seqs_by_id,
                           assignments, n_clusters, out_dir, shuffle_tag):
    """One adapter per cluster, each started from the base checkpoint with a
    fresh optimizer. Returns the final adapters in cluster order."""
    experts = []
    epochs = cfg.expert_epochs or cfg.epochs
    batch = cfg.expert_batch or cfg.batch
    for c in range(1, n_clusters + 1):
        member_ids = sorted(i for i, a in assignments.items() if a == c)
        if not member_ids:
            raise PipelineError(f"cluster {c} has no members")
        data = [seqs_by_id[i] for i in member_ids]
        run = trainer.train(
            backbone, base_adapter.copy(), data,
            epochs=epochs, eta0=cfg.eta_expert, batch=batch,
            seed=_derive_seed(cfg.seed_shuffle, f"{shuffle_tag}-{c}"),
            run_dir=os.path.join(out_dir, f"cluster-{c}"),
        )
        expert = run.adapters[-1]
        save_adapter(
            os.path.join(out_dir, f"expert-{c}.ckpt"), expert,
            meta={"cluster": c, "n_members": len(member_ids)},
        )
        experts.append(expert)
    return experts


def cmd_train_experts(cfg):
    backbone = _load_backbone_checked(cfg)
    run = _load_base_run(cfg)
    cmodel = _load_clusters(cfg)
    _, train_seqs = _load_split(cfg, cfg.corpus_train)
    seqs_by_id = {s.id: s for s in train_seqs}
    with StageTimer(cfg, "train-experts"):
        experts = _train_cluster_experts(
            cfg, backbone, run.adapters[-1], seqs_by_id,
            cmodel.assignments, cmodel.n_clusters,
            _p(cfg, "experts"), "expert",
        )
    _write_stage_meta(cfg, _p(cfg, "experts"), n_experts=len(experts))
    return experts


def _load_experts(cfg, out_dir, stage_name):
    meta = _check_stage(cfg, out_dir, stage_name)
    n = int(meta["n_experts"])
    return [
        load_adapter(os.path.join(out_dir, f"expert-{c}.ckpt"))[0]
        for c in range(1, n + 1)
    ]


def _routes_for_test(cfg, cmodel):
    _check_stage(cfg, _p(cfg, "routes"), "route")
    features = gradfeat.load_feature_matrix(_p(cfg, "routes", "test.features"))
    return router.route_batch(features, cmodel.centroids)


def cmd_route(cfg):
    backbone = _load_backbone_checked(cfg)
    run = _load_base_run(cfg)
    cmodel = _load_clusters(cfg)
    _, test_seqs = _load_split(cfg, cfg.corpus_test)
    os.makedirs(_p(cfg, "routes"), exist_ok=True)
    with StageTimer(cfg, "route") as timer:
        t0 = time.perf_counter()
        features = gradfeat.build_feature_matrix(
            backbone, test_seqs, run, _projection_spec(cfg, run),
            out_path=_p(cfg, "routes", "test.features"),
            batch_size=cfg.feature_batch,
        )
        # test-instruction features are charged to the fine-tuning side of
        # the timing table; the weight computation below is the inference
        # side of this stage
        timer.extra["feature_seconds"] = time.perf_counter() - t0
        routes = router.route_batch(features, cmodel.centroids)
        router.write_routes_csv(_p(cfg, "routes", "test_routes.csv"), routes)
        mean_w, mean_base = router.mean_weights(routes)
        store.write_json(
            _p(cfg, "routes", "summary.json"),
            {
                "mean_weights": [float(x) for x in mean_w],
                "mean_base_weight": mean_base,
                "n_instances": len(routes),
                "n_fallback": sum(1 for r in routes.values() if r.fallback),
            },
        )
    _write_stage_meta(cfg, _p(cfg, "routes"), n_instances=len(routes))
    return routes


def truncate_top_k(routing, k):
    """Keep the k largest expert weights, renormalized to sum 1; the base
    weight is untouched. Ties resolve toward the lower cluster id."""
    if k < 1:
        raise PipelineError("top-k must be positive")
    w = routing.weights
    if k >= w.shape[0]:
        return routing
    keep = np.argsort(-w, kind="stable")[:k]
    out = np.zeros_like(w)
    out[keep] = w[keep]
    total = float(out.sum())
    if total <= 0.0:
        out[keep] = 1.0 / k
    else:
        out /= total
    return router.RoutingWeights(
        cosines=routing.cosines,
        standardized=routing.standardized,
        weights=out,
        base_weight=routing.base_weight,
        fallback=routing.fallback,
    )


# --- generation ----------------------------------------------------------


def exact_match(pred, gold):
    """Extracted answers compared after trimming; unparsable prediction is a
    miss. Gold without an '=' falls back to its full stripped text."""
    pred_answer = corpus.extract_answer(pred)
    if pred_answer is None:
        return False
    return _answers_equal(pred_answer, gold)

def _answers_equal(pred_answer, gold_text):
    if pred_answer is None:
        return False
    gold_answer = corpus.extract_answer(gold_text)
    if gold_answer is None:
        gold_answer = gold_text.strip()
    return pred_answer.strip() == gold_answer.strip()


def _row(result, w_base, weights, extra=None):
    row = {
        "id": result.id,
        "generation": result.text,
        "answer": result.answer,
        "w_base": w_base,
        "weights": weights,
        "truncated": result.truncated,
        "steps": result.decode_steps,
    }
    if extra:
        row.update(extra)
    return row


def _prompts(cfg):
    vocab = corpus.Vocab()
    examples = corpus.load_jsonl(cfg.corpus_test)
    out = []
    for e in sorted(examples, key=lambda e: e.id):
        out.append((e, corpus.tokenize_prompt(e, vocab, max_len=cfg.max_len)))
    return out


def _method_rows(cfg, method, top_k):
    """Yield (example, generation row, seconds) for every test instance."""
    backbone = _load_backbone_checked(cfg)
    run = _load_base_run(cfg)
    base = run.adapters[-1]
    prompts = _prompts(cfg)

    need_routes = method in ("elrea", "moe-routing", "moe-merging")
    need_experts = need_routes or method in ("mole", "uniform")
    experts = routes = None
    if need_experts:
        experts = _load_experts(cfg, _p(cfg, "experts"), "train-experts")
    if need_routes:
        _check_stage(cfg, _p(cfg, "routes"), "route")
        routes = _routes_for_test(cfg, _load_clusters(cfg))

    def timed(fn):
        t0 = time.perf_counter()
        out = fn()
        return out, time.perf_counter() - t0

    if method == "base":
        for e, p in prompts:
            g, dt = timed(lambda: ensemble.generate_single(
                backbone, base, p, cfg.max_new_tokens))
            yield e, _row(g, 1.0, []), dt

    elif method in ("elrea", "uniform"):
        spec = ensemble.EnsembleSpec(
            backbone=backbone, adapters=[base] + experts,
            max_new_tokens=cfg.max_new_tokens,
            weights_source="routed" if method == "elrea" else "uniform",
        )
        for e, p in prompts:
            if method == "elrea":
                r = routes[e.id]
                if top_k:
                    r = truncate_top_k(r, top_k)
            else:
                r = ensemble.uniform_weights(len(experts))
            g, dt = timed(lambda: ensemble.generate(spec, p, r))
            yield e, _row(
                g, float(r.base_weight), [float(x) for x in r.weights],
                {"fallback": r.fallback} if method == "elrea" else None,
            ), dt

    elif method in ("moe-routing", "moe-merging"):
        members = [base] + experts
        for e, p in prompts:
            r = routes[e.id]
            if top_k:
                r = truncate_top_k(r, top_k)
            lam = np.concatenate(([r.base_weight], r.weights))
            if method == "moe-routing":
                mixed = ensemble.moe_routing_adapter(members, lam)
            else:
                mixed = merge_weighted(members, lam)
            g, dt = timed(lambda: ensemble.generate_single(
                backbone, mixed, p, cfg.max_new_tokens))
            yield e, _row(
                g, float(r.base_weight), [float(x) for x in r.weights]
            ), dt

    elif method == "mole":
        mixture = _load_gating(cfg, [base] + experts)
        for e, p in prompts:
            g, dt = timed(lambda: ensemble.gating_generate(
                backbone, mixture, p, cfg.max_new_tokens))
            yield e, _row(g, None, []), dt

    elif method == "lora-ens":
        extras = _load_experts(cfg, _p(cfg, "baselines", "lora-ens"),
                               "baseline lora-ens")
        spec = ensemble.EnsembleSpec(
            backbone=backbone, adapters=[base] + extras,
            max_new_tokens=cfg.max_new_tokens, weights_source="uniform",
        )
        r = ensemble.mean_logit_routing(1 + len(extras))
        for e, p in prompts:
            g, dt = timed(lambda: ensemble.generate(spec, p, r))
            yield e, _row(g, 1.0, [float(x) for x in r.weights]), dt

    elif method == "self-consistency":
        for e, p in prompts:
            v, dt = timed(lambda: ensemble.self_consistency(
                backbone, base, p,
                n_samples=cfg.sc_samples, temperature=cfg.sc_temperature,
                seed=cfg.seed_consistency, max_new_tokens=cfg.max_new_tokens,
                tie_seed=cfg.seed_tie,
            ))
            row = {
                "id": e.id,
                "generation": "",
                "answer": v.answer,
                "w_base": None,
                "weights": [],
                "truncated": any(s.truncated for s in v.samples),
                "steps": sum(s.decode_steps for s in v.samples),
                "votes": v.answers,
            }
            yield e, row, dt

    elif method == "random-cluster":
        rand_dir = _p(cfg, "baselines", "random-cluster")
        rand_experts = _load_experts(cfg, rand_dir, "baseline random-cluster")
        spec = ensemble.EnsembleSpec(
            backbone=backbone, adapters=[base] + rand_experts,
            max_new_tokens=cfg.max_new_tokens, weights_source="uniform",
        )
        r = ensemble.uniform_weights(len(rand_experts))
        for e, p in prompts:
            g, dt = timed(lambda: ensemble.generate(spec, p, r))
            yield e, _row(g, 1.0, [float(x) for x in r.weights]), dt

    else:
        raise PipelineError(f"unknown method {method!r}; choose from {METHODS}")


def cmd_generate(cfg, method, top_k=0):
    if method not in METHODS:
        raise PipelineError(f"unknown method {method!r}; choose from {METHODS}")
    os.makedirs(_p(cfg, "generations"), exist_ok=True)
    os.makedirs(_p(cfg, "timing"), exist_ok=True)
    rows = []
    timings = []
    with StageTimer(cfg, f"generate-{method}"):
        for e, row, dt in _method_rows(cfg, method, top_k):
            row["prompt"] = e.instruction
            rows.append(row)
            timings.append({"id": e.id, "seconds": dt})
    with open(_p(cfg, "generations", f"{method}.jsonl"), "w",
              encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    store.write_json(
        _p(cfg, "generations", f"{method}.meta.json"),
        {
            "config_hash": config_hash(cfg),
            "seeds": _seed_record(cfg),
            "method": method,
            "top_k": top_k,
            "n_instances": len(rows),
        },
    )
    with open(_p(cfg, "timing", f"generate-{method}.jsonl"), "w",
              encoding="utf-8") as f:
        for t in timings:
            f.write(json.dumps(t, sort_keys=True) + "\n")
    return rows


# --- baselines needing their own training -------------------------------


def _load_gating(cfg, members):
    gate_dir = _p(cfg, "baselines", "mole")
    _check_stage(cfg, gate_dir, "baseline mole")
    kind, arrays, meta = store.load_arrays(os.path.join(gate_dir, "gates.ckpt"))
    if kind != "gates":
        raise PipelineError(f"expected a gates checkpoint, got {kind!r}")
    mixture = ensemble.init_gating(members)
    gates = {}
    for path in sorted(mixture.gates):
        key = f"gates.{path}"
        if key not in arrays:
            raise PipelineError(f"gates.ckpt is missing {path!r}")
        if arrays[key].shape != mixture.gates[path].shape:
            raise PipelineError(f"gates.ckpt shape mismatch at {path!r}")
        gates[path] = arrays[key]
    mixture.gates = gates
    return mixture


def cmd_baseline(cfg, name):
    backbone = _load_backbone_checked(cfg)
    run = _load_base_run(cfg)
    base = run.adapters[-1]

    if name == "mole":
        experts = _load_experts(cfg, _p(cfg, "experts"), "train-experts")
        _, train_seqs = _load_split(cfg, cfg.corpus_train)
        with StageTimer(cfg, "baseline-mole"):
            mixture, losses = ensemble.gating_train(
                backbone, [base] + experts, train_seqs,
                epochs=cfg.mole_epochs, lr=cfg.mole_lr,
                batch=cfg.mole_batch or cfg.batch,
                seed=_derive_seed(cfg.seed_shuffle, "gating"),
            )
            gate_dir = _p(cfg, "baselines", "mole")
            os.makedirs(gate_dir, exist_ok=True)
            store.save_arrays(
                os.path.join(gate_dir, "gates.ckpt"), "gates",
                {f"gates.{p}": g for p, g in mixture.gates.items()},
                {"epochs": cfg.mole_epochs, "lr": cfg.mole_lr},
            )
            lam = ensemble.gating_lambda_table(backbone, mixture,
                                               train_seqs[: min(64, len(train_seqs))])
            with open(os.path.join(gate_dir, "lambda.csv"), "w",
                      encoding="utf-8", newline="") as f:
                w = csv.writer(f)
                w.writerow(["layer", "candidate", "mean_weight"])
                for p in sorted(lam):
                    for k, v in enumerate(lam[p]):
                        w.writerow([p, k, repr(float(v))])
        _write_stage_meta(cfg, gate_dir, epoch_losses=losses)

    elif name == "lora-ens":
        _, train_seqs = _load_split(cfg, cfg.corpus_train)
        out_dir = _p(cfg, "baselines", "lora-ens")
        with StageTimer(cfg, "baseline-lora-ens"):
            extras = ensemble.train_extra_adapters(
                backbone, train_seqs,
                n_extra=cfg.n_extra_adapters,
                seed=_derive_seed(cfg.seed_init, "extra-adapters"),
                r=cfg.r, epochs=cfg.epochs, eta0=cfg.eta_base,
                batch=cfg.batch, alpha=cfg.alpha or None,
                dropout_p=cfg.dropout,
            )
            os.makedirs(out_dir, exist_ok=True)
            for j, a in enumerate(extras, start=1):
                save_adapter(os.path.join(out_dir, f"expert-{j}.ckpt"), a,
                             meta={"member": j})
        _write_stage_meta(cfg, out_dir, n_experts=len(extras))

    elif name == "random-cluster":
        cmodel = _load_clusters(cfg)
        _, train_seqs = _load_split(cfg, cfg.corpus_train)
        seqs_by_id = {s.id: s for s in train_seqs}
        out_dir = _p(cfg, "baselines", "random-cluster")
        with StageTimer(cfg, "baseline-random-cluster"):
            assignments = ensemble.random_cluster_partition(
                list(seqs_by_id), cmodel.sizes, cfg.seed_cluster
            )
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "assignments.csv"), "w",
                      encoding="utf-8", newline="") as f:
                w = csv.writer(f)
                w.writerow(["id", "cluster"])
                for i in sorted(assignments):
                    w.writerow([i, assignments[i]])
            experts = _train_cluster_experts(
                cfg, backbone, run.adapters[-1], seqs_by_id,
                assignments, len(cmodel.sizes), out_dir, "random-expert",
            )
        _write_stage_meta(cfg, out_dir, n_experts=len(experts))

    else:
        raise PipelineError(
            f"baseline {name!r} needs no preparation; "
            f"run `elrea generate --method {name}` directly"
        )


# --- evaluation and reporting -------------------------------------------


@dataclass
class EvalReport:
    method: str
    per_tag: dict  # tag -> (count, correct)
    micro: float
    macro: float

    @classmethod
    def from_matches(cls, method, tag_matches):
        per_tag = {}
        for tag, ok in tag_matches:
            n, c = per_tag.get(tag, (0, 0))
            per_tag[tag] = (n + 1, c + (1 if ok else 0))
        total = sum(n for n, _ in per_tag.values())
        correct = sum(c for _, c in per_tag.values())
        accs = [c / n for n, c in per_tag.values()]
        return cls(
            method=method,
            per_tag=per_tag,
            micro=correct / total if total else 0.0,
            macro=sum(accs) / len(accs) if accs else 0.0,
        )


def _read_generations(cfg, method):
    path = _p(cfg, "generations", f"{method}.jsonl")
    _require(path, f"generate --method {method}", cfg)
    meta_path = _p(cfg, "generations", f"{method}.meta.json")
    _require(meta_path, f"generate --method {method}", cfg)
    meta = store.read_json(meta_path)
    if meta.get("config_hash") != config_hash(cfg):
        raise PipelineError(
            f"{path} was produced under a different configuration; "
            f"rerun `elrea generate --method {method}`"
        )
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_evaluate(cfg, method):
    rows = _read_generations(cfg, method)
    examples = corpus.load_jsonl(cfg.corpus_test)
    gold = {e.id: e for e in examples}
    tag_matches = []
    for row in rows:
        e = gold.get(row["id"])
        if e is None:
            raise PipelineError(
                f"generation for unknown test id {row['id']!r}; "
                "corpus and generations are out of sync"
            )
        if "votes" in row:
            ok = _answers_equal(row["answer"], e.response)
        else:
            ok = exact_match(row["generation"], e.response)
        tag_matches.append((e.source_tag, ok))
    report = EvalReport.from_matches(method, tag_matches)

    base_report = None
    if method != "base":
        base_path = _p(cfg, "eval", "base.csv")
        _require(base_path, "evaluate --method base", cfg)
        base_report = _read_eval_csv(base_path, cfg)

    os.makedirs(_p(cfg, "eval"), exist_ok=True)
    out = _p(cfg, "eval", f"{method}.csv")
    with open(out, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tag", "count", "correct", "accuracy", "delta_vs_base"])
        for tag in sorted(report.per_tag):
            n, c = report.per_tag[tag]
            acc = c / n
            if base_report is None:
                delta = 0.0
            else:
                bn, bc = base_report.per_tag.get(tag, (0, 0))
                delta = acc - (bc / bn if bn else 0.0)
            w.writerow([tag, n, c, repr(acc), repr(delta)])
        base_micro = base_report.micro if base_report else report.micro
        base_macro = base_report.macro if base_report else report.macro
        w.writerow(["micro", sum(n for n, _ in report.per_tag.values()),
                    sum(c for _, c in report.per_tag.values()),
                    repr(report.micro), repr(report.micro - base_micro)])
        w.writerow(["macro", "", "", repr(report.macro),
                    repr(report.macro - base_macro)])
    store.write_json(
        _p(cfg, "eval", f"{method}.meta.json"),
        {
            "config_hash": config_hash(cfg),
            "seeds": _seed_record(cfg),
            "method": method,
        },
    )
    return report


def _read_eval_csv(path, cfg):
    meta_path = path[: -len(".csv")] + ".meta.json"
    _require(meta_path, "evaluate", cfg)
    meta = store.read_json(meta_path)
    if meta.get("config_hash") != config_hash(cfg):
        raise PipelineError(
            f"{path} was produced under a different configuration; rerun "
            f"`elrea evaluate --method {meta.get('method', '?')}`"
        )
    per_tag = {}
    micro = macro = 0.0
    with open(path, "r", encoding="utf-8") as f:
        for row in list(csv.reader(f))[1:]:
            tag = row[0]
            if tag == "micro":
                micro = float(row[3])
            elif tag == "macro":
                macro = float(row[3])
            else:
                per_tag[tag] = (int(row[1]), int(row[2]))
    return EvalReport(method=meta.get("method", "?"), per_tag=per_tag,
                      micro=micro, macro=macro)


def cmd_report(cfg):
    eval_dir = _p(cfg, "eval")
    _require(os.path.join(eval_dir, "base.csv"), "evaluate --method base", cfg)
    reports = []
    for name in sorted(os.listdir(eval_dir)):
        if name.endswith(".csv"):
            reports.append(_read_eval_csv(os.path.join(eval_dir, name), cfg))
    tags = sorted({t for r in reports for t in r.per_tag})
    os.makedirs(_p(cfg, "report"), exist_ok=True)
    with open(_p(cfg, "report", "summary.csv"), "w", encoding="utf-8",
              newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "micro", "macro"] + [f"acc_{t}" for t in tags])
        for r in sorted(reports, key=lambda r: r.method):
            row = [r.method, repr(r.micro), repr(r.macro)]
            for t in tags:
                n, c = r.per_tag.get(t, (0, 0))
                row.append(repr(c / n) if n else "")
            w.writerow(row)

    cluster_report = _p(cfg, "clusters", "report.csv")
    if os.path.exists(cluster_report):
        with open(cluster_report, "r", encoding="utf-8") as src, open(
            _p(cfg, "report", "cluster_families.csv"), "w", encoding="utf-8"
        ) as dst:
            dst.write(src.read())

    # timing table is derived from the volatile sidecars, so it lives with
    # them rather than with the reproducible artifacts
    stages = [
        "train-base", "grad-features", "cluster", "train-experts", "route",
    ]
    stages += [f"generate-{m}" for m in METHODS]
    stages += ["baseline-mole", "baseline-lora-ens", "baseline-random-cluster"]
    rows = [(s, _read_stage_seconds(cfg, s)) for s in stages]
    rows = [(s, t) for s, t in rows if t is not None]
    os.makedirs(_p(cfg, "timing"), exist_ok=True)
    with open(_p(cfg, "timing", "table.csv"), "w", encoding="utf-8",
              newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "seconds"])
        for s, t in rows:
            w.writerow([s, repr(t)])
        named = dict(rows)
        route_rec = _read_stage_timing(cfg, "route") or {}
        test_feat = float(route_rec.get("feature_seconds", 0.0))
        if route_rec:
            w.writerow(["grad-features-test", repr(test_feat)])
        if "train-base" in named:
            # fine-tuning total counts base training, both feature passes,
            # and expert training; clustering and weight computation are
            # inference-side bookkeeping and stay out of it
            total = test_feat + sum(
                named.get(s, 0.0)
                for s in ("train-base", "grad-features", "train-experts")
            )
            w.writerow(["finetune-total", repr(total)])
            w.writerow(
                ["finetune-ratio-vs-base", repr(total / named["train-base"])]
            )


def cmd_all(cfg):
    cmd_train_base(cfg)
    cmd_grad_features(cfg)
    cmd_cluster(cfg)
    cmd_train_experts(cfg)
    cmd_route(cfg)
    methods = ["base", "elrea"]
    for name in [b.strip() for b in cfg.baselines.split(",") if b.strip()]:
        if name not in METHODS:
            raise PipelineError(f"unknown baseline {name!r} in config")
        if name in ("mole", "lora-ens", "random-cluster"):
            cmd_baseline(cfg, name)
        if name not in methods:
            methods.append(name)
    for m in methods:
        cmd_generate(cfg, m, cfg.top_k if m == "elrea" else 0)
    for m in methods:
        cmd_evaluate(cfg, m)
    cmd_report(cfg)


# --- CLI -----------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="elrea",
        description="gradient-clustered expert-adapter pipeline",
    )
    parser.add_argument("command", choices=[
        "train-base", "grad-features", "cluster", "train-experts", "route",
        "generate", "evaluate", "baseline", "report", "all",
    ])
    parser.add_argument("name", nargs="?", default=None,
                        help="baseline name for the baseline command")
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--method", default=None, choices=METHODS)
    parser.add_argument("--top-k", type=int, default=None, dest="top_k")
    args = parser.parse_args(argv)

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = parse_config(args.config, overrides)
        if args.top_k is not None:
            cfg.top_k = args.top_k
        if args.command == "generate":
            if not args.method:
                raise PipelineError("generate requires --method")
            cmd_generate(cfg, args.method, cfg.top_k)
        elif args.command == "evaluate":
            if not args.method:
                raise PipelineError("evaluate requires --method")
            report = cmd_evaluate(cfg, args.method)
            print(f"{args.method}: micro={report.micro:.4f} "
                  f"macro={report.macro:.4f}")
        elif args.command == "baseline":
            if not args.name:
                raise PipelineError("baseline requires a name argument")
            cmd_baseline(cfg, args.name)
        elif args.command == "train-base":
            cmd_train_base(cfg)
        elif args.command == "grad-features":
            cmd_grad_features(cfg)
        elif args.command == "cluster":
            cmd_cluster(cfg)
        elif args.command == "train-experts":
            cmd_train_experts(cfg)
        elif args.command == "route":
            cmd_route(cfg)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "all":
            cmd_all(cfg)
    except (PipelineError, corpus.CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
