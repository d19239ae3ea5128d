"""Report rendering: delimited exports plus matplotlib figures.

The CLI's report path writes, next to the JSON report, a CSV of receipts and
a couple of PNG figures (per-operation round counts, final ownership, sweep
outcomes, bench distributions).  Matplotlib is imported lazily and always
uses the Agg backend so headless runs work.
"""

from __future__ import annotations

import csv
import json
import os


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def write_report_json(report: dict, path: str) -> None:
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    with open(path, "w") as fh:
        json.dump(clean, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_receipts_csv(report: dict, path: str) -> None:
    fields = ["sid", "kind", "party", "role", "start", "complete", "rounds", "onchain"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for receipt in report["receipts"]:
            writer.writerow(receipt)


def render_run_figures(report: dict, out_dir: str) -> list[str]:
    plt = _plt()
    os.makedirs(out_dir, exist_ok=True)
    written = []

    receipts = report["receipts"]
    if receipts:
        fig, ax = plt.subplots(figsize=(7, 3.5))
        labels = ["%s\n%s" % (r["kind"], r.get("party", "")) for r in receipts]
        rounds = [r["rounds"] for r in receipts]
        onchain = [r["onchain"] for r in receipts]
        x = range(len(receipts))
        ax.bar(x, rounds, width=0.6, label="rounds", color="#4878d0")
        ax.bar(x, onchain, width=0.3, label="on-chain txs", color="#d65f5f")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("count")
        ax.set_title("%s: operation cost" % report["name"])
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "receipts.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    ownership = report["ownership"]
    if ownership:
        fig, ax = plt.subplots(figsize=(6, 0.6 + 0.4 * len(ownership)))
        ax.axis("off")
        rows = [[aid, str(info["party"]), info["via"]] for aid, info in sorted(ownership.items())]
        table = ax.table(cellText=rows, colLabels=["asset", "owner", "via"],
                         loc="center", cellLoc="left")
        table.auto_set_font_size(False)
        table.set_fontsize(9)
        ax.set_title("final ownership", fontsize=10)
        fig.tight_layout()
        path = os.path.join(out_dir, "ownership.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_sweep_csv(reports: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "crash_party", "crash_round", "fair", "differential", "ok"])
        for rep in reports:
            point = rep.get("crash_point", {})
            fair = all(f["pass"] for f in rep["fairness"]) if rep["fairness"] else True
            diff = rep["differential"]["equal"] if rep["differential"] else None
            writer.writerow([rep["name"], point.get("party"), point.get("round"),
                             fair, diff, rep["ok"]])


def render_sweep_figure(reports: list[dict], out_dir: str) -> str:
    plt = _plt()
    os.makedirs(out_dir, exist_ok=True)
    parties = sorted({r["crash_point"]["party"] for r in reports})
    rounds = sorted({r["crash_point"]["round"] for r in reports})
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(rounds) + 2), 2.5))
    for y, party in enumerate(parties):
        for r in reports:
            if r["crash_point"]["party"] != party:
                continue
            x = rounds.index(r["crash_point"]["round"])
            ax.scatter(x, y, marker="s", s=160,
                       color="#55a868" if r["ok"] else "#c44e52")
    ax.set_yticks(range(len(parties)))
    ax.set_yticklabels(parties)
    ax.set_xticks(range(len(rounds)))
    ax.set_xticklabels(rounds, fontsize=7)
    ax.set_xlabel("crash round")
    ax.set_title("single-crash sweep (green = fair + oracle-equal)")
    fig.tight_layout()
    path = os.path.join(out_dir, "sweep.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_bench_csv(counters: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["op", "runs", "rounds_min", "rounds_max",
                         "messages_min", "messages_max", "onchain_max"])
        for op, c in sorted(counters.items()):
            writer.writerow([op, c["runs"], c["rounds_min"], c["rounds_max"],
                             c["messages_min"], c["messages_max"], c["onchain_max"]])


def render_bench_figure(counters: dict, out_dir: str) -> str:
    plt = _plt()
    os.makedirs(out_dir, exist_ok=True)
    ops = sorted(counters)
    fig, ax = plt.subplots(figsize=(6, 3))
    x = range(len(ops))
    ax.bar([i - 0.2 for i in x], [counters[o]["rounds_max"] for o in ops],
           width=0.4, label="rounds (max)", color="#4878d0")
    ax.bar([i + 0.2 for i in x], [counters[o]["messages_max"] for o in ops],
           width=0.4, label="messages (max)", color="#ee854a")
    ax.set_xticks(list(x))
    ax.set_xticklabels(ops)
    ax.set_ylabel("count")
    ax.set_title("per-operation round and message counts")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "bench.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
