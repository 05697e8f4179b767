"""Report rendering: aligned text, JSONL and matplotlib figures."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import aligned_table, to_jsonl  # noqa: E402

TABLE3_COLS = ["name", "fill_ratio_pct", "ib_ppl_mask", "ib_acc_mask_pct", "ib_ppl_fill", "ib_acc_fill_pct"]

RANKER_COLS = ["name", "auc", "gauc", "n_test"]
LOCATOR_COLS = ["precision", "random_precision", "lift", "recall", "n_flags", "n_labeled"]


def report_rows(m: dict) -> list[dict]:
    """Flat rows, one per reported quantity group, in a fixed order."""
    rows = []
    for r in m["table3"]:
        rows.append({"section": "dllm", **{k: r[k] for k in TABLE3_COLS}})
    for r in m["ranker"]:
        rows.append({"section": "ranker", **r})
    rows.append({"section": "locator", **m["locator"]})
    for r in m["retrieval"]:
        rows.append({"section": "retrieval", **r})
    return rows


def _nan(v):
    return float("nan") if v is None else v


def render_text(m: dict, cfg) -> str:
    parts = [f"preset: {cfg.preset}  seed: {cfg.seed}\n"]
    parts.append("\n== behaviour fill (held-out; percentages where marked)\n")
    parts.append(aligned_table([{k: _nan(r[k]) for k in TABLE3_COLS} for r in m["table3"]], TABLE3_COLS))
    parts.append("\n== ranker (test split)\n")
    parts.append(aligned_table([{k: _nan(r[k]) for k in RANKER_COLS} for r in m["ranker"]], RANKER_COLS))
    parts.append("\n== gap location (detectable gaps)\n")
    parts.append(aligned_table([{k: _nan(m["locator"][k]) for k in LOCATOR_COLS}], LOCATOR_COLS))
    parts.append("\n== item representation retrieval\n")
    cols = ["name", "value", "macro_recall(category-mean)", "n", "singletons"]
    parts.append(aligned_table([{c: _nan(r.get(c, "")) if c in r else "" for c in cols} for r in m["retrieval"]],
                               cols))
    return "".join(parts)


def _fig_dllm(path: Path, trace: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    variants = sorted({r["variant"] for r in trace}, key=[r["variant"] for r in trace].index)
    for v in variants:
        pts = [(r["step"], r["loss"]) for r in trace if r["variant"] == v]
        if not pts:
            continue
        # smoothed by block means so curves stay readable at any step count
        w = max(1, len(pts) // 100)
        xs = [pts[i][0] for i in range(0, len(pts) - w + 1, w)]
        ys = [sum(p[1] for p in pts[i:i + w]) / w for i in range(0, len(pts) - w + 1, w)]
        ax.plot(xs, ys, label=v)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _fig_ib(path: Path, table3: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["name"] for r in table3]
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], [_nan(r["ib_acc_mask_pct"]) for r in table3], width=0.4, label="IB-ACC [MASK]")
    ax.bar([i + 0.2 for i in x], [_nan(r["ib_acc_fill_pct"]) for r in table3], width=0.4, label="IB-ACC [FILL]")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("%")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _fig_ranker(path: Path, trace: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in sorted({r["histories"] for r in trace}):
        pts = [(r["epoch"], r["test_auc"]) for r in trace if r["histories"] == name and "test_auc" in r]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test AUC")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(out: Path, m: dict, dllm_trace: list[dict], ranker_trace: list[dict], cfg) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(render_text(m, cfg))
    (out / "report.jsonl").write_text(to_jsonl(report_rows(m)))
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    _fig_dllm(fig_dir / "dllm_loss.png", dllm_trace)
    _fig_ib(fig_dir / "ib_acc.png", m["table3"])
    _fig_ranker(fig_dir / "ranker_auc.png", ranker_trace)
