"""Stage orchestration with content-hash manifests.

Each stage reads the artifacts of the stages it depends on, writes its own
under ``<out>/<dir>/`` and records a manifest with the sha256 of every input
and output plus a hash of the config sections it reads. A stage is skipped
when its manifest still matches and no upstream stage ran in the same
invocation.
"""
from __future__ import annotations

import hashlib
import json
import logging
import pickle
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import agents as ag
from . import baseline_rec, dllm, embedding, io, locator, metrics, ranker, tokenizer, worldgen
from .config import RunConfig
from .embedding import ItemKnowledge
from .rng import derive_rng

log = logging.getLogger("beyondlog")

ORDER = ("gen-world", "agents", "encode", "tokenize", "locate", "train-dllm", "fill", "train-ranker", "eval",
         "report")

DEPS = {
    "gen-world": (),
    "agents": ("gen-world",),
    "encode": ("agents",),
    "tokenize": ("encode",),
    "locate": ("gen-world",),
    "train-dllm": ("locate", "encode"),
    "fill": ("train-dllm", "locate", "encode"),
    "train-ranker": ("fill", "tokenize", "gen-world", "encode"),
    "eval": ("train-ranker", "train-dllm", "locate", "encode", "gen-world"),
    "report": ("eval", "train-dllm", "train-ranker"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class MissingArtifactError(StageError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass
class Ctx:
    cfg: RunConfig
    out: Path

    def p(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def world(self):
        with open(self.p("world", "world.pkl"), "rb") as f:
            return pickle.load(f)

    def reps(self) -> np.ndarray:
        ids, H = io.read_embeddings(self.p("encode", "item_reps.bin"))
        if ids != list(range(len(ids))):
            raise StageError("encode", "item_reps ids are not 0..V-1 in order")
        return H


# ------------------------------------------------------------------ shared builders

def world_config(cfg: RunConfig) -> worldgen.WorldConfig:
    w = dict(cfg["world"])
    name = w.pop("preset", "default")
    return worldgen.preset(name, seed=cfg.seed, **w)


def tau_time(cfg: RunConfig, full) -> float:
    loc = cfg["locator"]
    if loc["tau_time"] == "auto":
        return float(worldgen.session_gap_quantile(full, loc["tau_time_quantile"]))
    return float(loc["tau_time"])


def locator_config(cfg: RunConfig, full) -> locator.LocatorConfig:
    loc = cfg["locator"]
    return locator.LocatorConfig(tau_time=tau_time(cfg, full), n_rank=loc["n_rank"], tau_coh=loc["tau_coh"],
                                 scheme=loc["scheme"])


def dllm_config(cfg: RunConfig, d: int, variant: str) -> dllm.DLLMConfig:
    c = {k: v for k, v in cfg["dllm"].items() if k not in ("variants", "heldout_frac")}
    return dllm.DLLMConfig(d=d, loss_variant=variant, seed=cfg.seed, eval_every=0, **c)


def ranker_config(cfg: RunConfig) -> ranker.RankerConfig:
    return ranker.RankerConfig(seed=cfg.seed, **cfg["ranker"])


def split_users(n_users: int, heldout_frac: float, seed: int) -> tuple[list[int], list[int]]:
    order = derive_rng(seed, "dllm", "split").permutation(n_users)
    n_held = max(1, int(round(n_users * heldout_frac)))
    return sorted(order[n_held:].tolist()), sorted(order[:n_held].tolist())


def catalog(world, H: np.ndarray, sids) -> ranker.Catalog:
    codes = np.array([[c - 1 for c in s.codes] for s in sids], dtype=np.int64)
    feats = np.array([[it.features["price_bucket"] / 4.0, np.log(it.features["popularity"])] for it in world.items])
    K = int(max(1, codes.max() + 1)) if codes.size else 1
    return ranker.Catalog(codes, feats, H, K)


def examples(impressions) -> list[ranker.Example]:
    return [ranker.Example(i.user_id, i.item_id, np.asarray(i.f_u, dtype=np.float64),
                           np.asarray(i.f_c, dtype=np.float64), int(i.label)) for i in impressions]


# ------------------------------------------------------------------ stages

def stage_gen_world(ctx: Ctx) -> None:
    wcfg = world_config(ctx.cfg)
    world = worldgen.generate_world(wcfg)
    full = worldgen.generate_sequences(world)
    observed, truths = worldgen.censor(world, full)
    imps = worldgen.label_clicks(world, observed, truths=truths)
    d = ctx.p("world")
    with open(d / "world.pkl", "wb") as f:
        pickle.dump({"world": world, "full": full, "observed": observed, "truths": truths, "impressions": imps},
                    f, protocol=4)
    _jsonl(d / "observed.jsonl", ({"user_id": u, "events": [[e.item_id, e.ts] for e in o]}
                                  for u, o in enumerate(observed)))
    _jsonl(d / "truth.jsonl", ({"user_id": t.user_id, "gaps": [asdict(g) for g in t.gaps]} for t in truths))
    _jsonl(d / "impressions.jsonl", (asdict(i) for i in imps))
    (d / "world_config.json").write_text(json.dumps(worldgen.config_dict(wcfg), sort_keys=True) + "\n")


def _llm(cfg: RunConfig, world):
    a = cfg["agents"]
    if a["client"] == "mock":
        return ag.mock_llm(world.tables, cfg.seed)
    return ag.HTTPChatClient(a["endpoint"], a["model"])


def stage_agents(ctx: Ctx) -> None:
    w = ctx.world()["world"]
    a = ctx.cfg["agents"]
    budget = ag.AgentBudget(max_retries=a["max_retries"], cache_dir=a["cache_dir"], max_workers=a["max_workers"])
    agents = ag.Agents(_llm(ctx.cfg, w), budget)
    run = ag.run_agents(ag.item_meta_from_world(w), w.tables.queries, agents, sample_size=a["sample_size"])
    _jsonl(ctx.p("agents", "knowledge.jsonl"),
           ({"item_id": i, **run.knowledge[i].to_dict()} for i in sorted(run.knowledge)))
    ctx.p("agents", "taxonomies.jsonl").write_text(run.taxonomies_json())


def stage_encode(ctx: Ctx) -> None:
    rows = _read_jsonl(ctx.p("agents", "knowledge.jsonl"))
    knowledge = [ItemKnowledge.from_dict(r["item_id"], r) for r in rows]
    e = ctx.cfg["encode"]
    ids, H = embedding.encode_items(knowledge, embedding.hash_encoder(e["dim"], e["encoder_seed"]))
    io.write_embeddings(ctx.p("encode", "item_reps.bin"), ids, H)


def stage_tokenize(ctx: Ctx) -> None:
    H = ctx.reps()
    tcfg = tokenizer.RQVAEConfig(d=H.shape[1], seed=ctx.cfg.seed, **ctx.cfg["tokenizer"])
    model = tokenizer.train_rqvae(H, tcfg)
    io.save_checkpoint(ctx.p("tokenize", "rqvae.ckpt"), model.params, {"config": asdict(tcfg)})
    tokenizer.save_sids(ctx.p("tokenize", "sids.jsonl"), tokenizer.extract_sids(range(len(H)), H, model))
    _jsonl(ctx.p("tokenize", "loss_curve.jsonl"), model.loss_curve)


def stage_locate(ctx: Ctx) -> None:
    bundle = ctx.world()
    world, full, observed = bundle["world"], bundle["full"], bundle["observed"]
    loc = ctx.cfg["locator"]
    ids = [[e.item_id for e in o] for o in observed]
    model = baseline_rec.fit(ids, len(world.items), window=loc["cooc_window"], decay=loc["cooc_decay"])
    lcfg = locator_config(ctx.cfg, full)
    prim = {it.item_id: it.primary() for it in world.items}
    p_u, p_l = [], []
    for o, s in zip(observed, ids):
        u, l_ = locator.locate(s, [e.ts for e in o], prim, model, lcfg)
        p_u.append(u)
        p_l.append(l_)
    baseline_rec.save(model, ctx.p("locate", "cooc.jsonl"))
    locator.save_token_sequences(ctx.p("locate", "token_seqs.jsonl"), locator.build_token_sequences(ids, p_l, p_u))
    _jsonl(ctx.p("locate", "positions.jsonl"),
           ({"user_id": u, "p_u": list(map(int, a)), "p_l": list(map(int, b))}
            for u, (a, b) in enumerate(zip(p_u, p_l))))
    (ctx.p("locate", "locator.json")).write_text(json.dumps({"tau_time": lcfg.tau_time, "n_rank": lcfg.n_rank,
                                                             "tau_coh": lcfg.tau_coh, "scheme": lcfg.scheme},
                                                            sort_keys=True) + "\n")


def _token_split(ctx: Ctx):
    seqs = locator.load_token_sequences(ctx.p("locate", "token_seqs.jsonl"))
    tr, held = split_users(len(seqs), ctx.cfg["dllm"]["heldout_frac"], ctx.cfg.seed)
    return seqs, [seqs[i] for i in tr], [seqs[i] for i in held]


def stage_train_dllm(ctx: Ctx) -> None:
    H = ctx.reps()
    _, train, _ = _token_split(ctx)
    traces = []
    for variant in ctx.cfg["dllm"]["variants"]:
        dcfg = dllm_config(ctx.cfg, H.shape[1], variant)
        model = dllm.train(train, H, dcfg)
        io.save_checkpoint(ctx.p("dllm", f"{variant}.ckpt"), model.params, {"config": asdict(dcfg)})
        traces.extend({"variant": variant, **r} for r in model.trace)
    _jsonl(ctx.p("dllm", "trace.jsonl"), traces)


def load_dllm(ctx: Ctx, variant: str, d: int) -> dllm.DLLM:
    dcfg = dllm_config(ctx.cfg, d, variant)
    store = dllm.init_params(dcfg)
    io.load_checkpoint(ctx.p("dllm", f"{variant}.ckpt"), into=store)
    return dllm.DLLM(dcfg, store)


def stage_fill(ctx: Ctx) -> None:
    H = ctx.reps()
    seqs, _, _ = _token_split(ctx)
    model = load_dllm(ctx, ctx.cfg["dllm"]["variants"][0], H.shape[1])
    dllm.save_completed(ctx.p("fill", "completed.jsonl"), dllm.infer_fill(model, H, seqs))


def ranker_histories(bundle, completed) -> dict[str, dict]:
    observed = bundle["observed"]
    return {
        "censored": {u: [e.item_id for e in o] for u, o in enumerate(observed)},
        "completed": {c.user_id: c.slots for c in completed},
    }


def stage_train_ranker(ctx: Ctx) -> None:
    bundle = ctx.world()
    H = ctx.reps()
    cat = catalog(bundle["world"], H, tokenizer.load_sids(ctx.p("tokenize", "sids.jsonl")))
    rcfg = ranker_config(ctx.cfg)
    train, test = ranker.split_examples(examples(bundle["impressions"]), rcfg.test_frac, ctx.cfg.seed)
    traces = []
    completed = dllm.load_completed(ctx.p("fill", "completed.jsonl"))
    for name, hist in ranker_histories(bundle, completed).items():
        model = ranker.train_ctr(train, hist, cat, rcfg, test=test)
        io.save_checkpoint(ctx.p("ranker", f"{name}.ckpt"), model.params, {"config": asdict(rcfg)})
        ranker.save_scores(ctx.p("ranker", f"scores_{name}.jsonl"), test, ranker.score(model, cat, test, hist))
        traces.extend({"histories": name, **r} for r in model.trace)
    _jsonl(ctx.p("ranker", "trace.jsonl"), traces)


def _eval_locator(bundle, ctx: Ctx) -> dict:
    rows = _read_jsonl(ctx.p("locate", "positions.jsonl"))
    flags = [r["p_u"] for r in rows]
    truths = bundle["truths"]
    true_gaps = [[g.after_index for g in t.gaps if g.detectable] for t in truths]
    prec, rec = locator.gap_precision_recall(flags, true_gaps)
    lengths = [len(o) for o in bundle["observed"]]
    base = locator.random_baseline_precision(lengths, true_gaps)
    return {"precision": prec, "recall": rec, "random_precision": base,
            "lift": prec / base if base > 0 else float("nan"),
            "n_flags": sum(map(len, flags)), "n_labeled": sum(len(r["p_l"]) for r in rows)}


def _eval_reps(bundle, H: np.ndarray, ctx: Ctx) -> list[dict]:
    world = bundle["world"]
    e = ctx.cfg["eval"]
    hist = {u: [ev.item_id for ev in o] for u, o in enumerate(bundle["observed"])}
    clicked = [i for i in bundle["impressions"] if i.label == 1]
    seqs = [hist[i.user_id][-20:] for i in clicked]
    targets = [i.item_id for i in clicked]
    ids = list(range(len(world.items)))
    out = []
    for k in e["hr_k"]:
        groups: dict[str, list] = {}
        for s, t in zip(seqs, targets):
            groups.setdefault(world.items[t].primary(), []).append((s, t))
        rates = {g: metrics.hr_at_k([s for s, _ in v], [t for _, t in v], ids, H, k) for g, v in sorted(groups.items())}
        out.append({"name": f"HR@{k}", "value": metrics.hr_at_k(seqs, targets, ids, H, k),
                    "macro_recall(category-mean)": metrics.macro_recall(rates), "n": len(targets)})
    spu = {it.item_id: it.spu_id for it in world.items}
    for k in e["sm_hr_k"]:
        r = metrics.sm_hr_at_k(ids, H, spu, k)
        out.append({"name": f"SM-HR@{k}", "value": r.rate, "n": r.n_queries, "singletons": r.n_singletons})
    return out


def stage_eval(ctx: Ctx) -> None:
    bundle = ctx.world()
    H = ctx.reps()
    _, _, held = _token_split(ctx)
    n_fill = sum(s.count(locator.FILL) for s in held)
    n_obs = sum(s.count(locator.OBS) + s.count(locator.MASK) for s in held)
    rows = []
    for variant in ctx.cfg["dllm"]["variants"]:
        model = load_dllm(ctx, variant, H.shape[1])
        ev = metrics.evaluate_dllm(model, held, H, seed=ctx.cfg.seed)
        rows.append((variant, ev, {"n_fill": n_fill, "n_observed": n_obs,
                                   "n_eval_sequences": ev["n_eval_sequences"],
                                   "skipped_fill_slots": ev["skipped_fill_slots"]}))
    table3 = [r.row() for r in metrics.table3_report(rows)]
    test_rows = {}
    for name in ("censored", "completed"):
        test_rows[name] = _read_jsonl(ctx.p("ranker", f"scores_{name}.jsonl"))
    _, test = ranker.split_examples(examples(bundle["impressions"]), ctx.cfg["ranker"]["test_frac"], ctx.cfg.seed)
    labels = [ex.label for ex in test]
    ctr = []
    for name, rs in test_rows.items():
        s = [r["score"] for r in rs]
        u = [r["user_id"] for r in rs]
        ctr.append({"name": name, "auc": metrics.auc(s, labels), "gauc": metrics.gauc(u, s, labels),
                    "n_test": len(rs)})
    out = {"locator": _eval_locator(bundle, ctx), "table3": table3, "ranker": ctr,
           "retrieval": _eval_reps(bundle, H, ctx)}
    ctx.p("eval", "metrics.json").write_text(json.dumps(_clean(out), sort_keys=True, indent=1) + "\n")


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if not np.isfinite(v) else round(v, 10)
    if isinstance(v, np.integer):
        return int(v)
    return v


def stage_report(ctx: Ctx) -> None:
    from .report import write_report
    m = json.loads(ctx.p("eval", "metrics.json").read_text())
    write_report(ctx.p("report"), m, _read_jsonl(ctx.p("dllm", "trace.jsonl")),
                 _read_jsonl(ctx.p("ranker", "trace.jsonl")), ctx.cfg)


STAGES: dict[str, tuple[str, Callable[[Ctx], None]]] = {
    "gen-world": ("world", stage_gen_world),
    "agents": ("agents", stage_agents),
    "encode": ("encode", stage_encode),
    "tokenize": ("tokenize", stage_tokenize),
    "locate": ("locate", stage_locate),
    "train-dllm": ("dllm", stage_train_dllm),
    "fill": ("fill", stage_fill),
    "train-ranker": ("ranker", stage_train_ranker),
    "eval": ("eval", stage_eval),
    "report": ("report", stage_report),
}


# ------------------------------------------------------------------ manifests

def manifest_path(out: Path, stage: str) -> Path:
    return out / "manifests" / f"{stage}.json"


def _outputs(out: Path, stage: str) -> dict[str, str]:
    d = out / STAGES[stage][0]
    if not d.is_dir():
        return {}
    return {str(p.relative_to(out)): sha256_file(p) for p in sorted(d.rglob("*")) if p.is_file()}


def _read_manifest(out: Path, stage: str) -> dict | None:
    p = manifest_path(out, stage)
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        return None


def _inputs(out: Path, stage: str) -> dict[str, str]:
    found = {}
    for dep in DEPS[stage]:
        m = _read_manifest(out, dep)
        files = _outputs(out, dep)
        if m is None or not files:
            raise MissingArtifactError(stage, f"missing artifacts of stage '{dep}'; run `beyondlog {dep}` first")
        found.update(files)
    return found


def is_current(cfg: RunConfig, stage: str) -> bool:
    m = _read_manifest(cfg.out, stage)
    if m is None or m.get("version") != __version__ or m.get("config_hash") != cfg.stage_hash(stage):
        return False
    try:
        if m.get("inputs") != _inputs(cfg.out, stage):
            return False
    except MissingArtifactError:
        return False
    return m.get("outputs") == _outputs(cfg.out, stage) and bool(m.get("outputs"))


def run_stage(cfg: RunConfig, stage: str, force: bool = False) -> bool:
    """Run one stage if it is stale (or ``force``). Returns True when it ran."""
    if stage not in STAGES:
        raise StageError(stage, f"unknown stage; choose from {', '.join(ORDER)}")
    out = Path(cfg.out)
    inputs = _inputs(out, stage)
    if not force and is_current(cfg, stage):
        log.info("%s: up to date", stage)
        return False
    d = out / STAGES[stage][0]
    if d.exists():
        for p in sorted(d.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    d.mkdir(parents=True, exist_ok=True)
    manifest_path(out, stage).unlink(missing_ok=True)
    t0 = time.time()
    log.info("%s: running", stage)
    try:
        STAGES[stage][1](Ctx(cfg, out))
    except StageError:
        raise
    except Exception as e:
        raise StageError(stage, f"{type(e).__name__}: {e}") from e
    manifest = {"stage": stage, "version": __version__, "seed": cfg.seed, "preset": cfg.preset,
                "config_hash": cfg.stage_hash(stage), "inputs": inputs, "outputs": _outputs(out, stage),
                "wall_seconds": round(time.time() - t0, 3)}
    manifest_path(out, stage).parent.mkdir(parents=True, exist_ok=True)
    manifest_path(out, stage).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    log.info("%s: done in %.1fs", stage, time.time() - t0)
    return True


def run(cfg: RunConfig, stages=None, force: bool = False) -> list[str]:
    """Run ``stages`` (default: all) in dependency order; a stage reruns when it is
    stale or any upstream stage ran in this call. Returns the stages that ran."""
    wanted = set(stages or ORDER)
    ran: list[str] = []
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.yaml").write_text(cfg.dump())
    for stage in ORDER:
        if stage not in wanted:
            continue
        upstream_ran = any(dep in ran for dep in DEPS[stage])
        if run_stage(cfg, stage, force=force or upstream_ran):
            ran.append(stage)
    return ran
