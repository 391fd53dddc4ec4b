"""Run statistics: JSON summary, CSV timelines, and rendered figures.

The JSON schema is stable and fully ordered so identical runs emit
byte-identical files (the generated_at field is the one exclusion callers
strip before comparing).  CSV timelines and PNG figures land next to the
JSON for external analysis.
"""

from __future__ import annotations

import json
import os
import time

from .errors import ConsistencyFault
from .engine import Simulator


def percentile_nearest_rank(samples: list[int], p: float) -> int:
    """Nearest-rank percentile; samples need not be sorted."""
    if not samples:
        raise ValueError("no samples")
    s = sorted(samples)
    rank = max(1, -(-len(s) * p // 100))  # ceil(n * p / 100)
    return s[int(rank) - 1]


def tbt_samples(state) -> list[int]:
    """Per-token latencies from a retired generative request state."""
    if not state.token_times:
        return []
    out = [state.token_times[0] - state.started_at]
    for a, b in zip(state.token_times, state.token_times[1:]):
        out.append(b - a)
    return out


def build_report(sim: Simulator) -> dict:
    cfg = sim.cfg
    total = sim.total_cycles()

    cores = []
    for core in sim.cores:
        idle = total - core.busy_union
        cores.append({
            "id": core.core_id,
            "busy_cycles": dict(sorted(core.busy_cycles.items())),
            "busy_union": core.busy_union,
            "idle": idle,
        })
    if total > 0:
        acc = sum(c["busy_union"] + c["idle"] for c in cores)
        if acc != cfg.num_cores * total:
            raise ConsistencyFault(
                f"core busy/idle accounting off: {acc} != {cfg.num_cores * total}"
            )

    dram_bytes = sim.dram.total_bytes()
    peak = total * cfg.dram.channels * cfg.dram.peak_bytes_per_cycle
    requests = []
    for st in sorted(sim.scheduler.retired, key=lambda s: s.req.request_id):
        req = st.req
        entry = {
            "request_id": req.request_id,
            "kind": req.kind,
            "batch": req.batch,
            "arrival": req.arrival,
            "started": st.started_at,
            "completed": st.completed_at,
            "latency": st.completed_at - req.arrival,
            "background_spawns": st.spawn,
        }
        samples = tbt_samples(st)
        if samples:
            entry["tokens"] = {
                "count": len(samples),
                "tbt_p50": percentile_nearest_rank(samples, 50),
                "tbt_p95": percentile_nearest_rank(samples, 95),
                "tbt_p99": percentile_nearest_rank(samples, 99),
                "tbt_mean": sum(samples) / len(samples),
            }
        requests.append(entry)

    report = {
        "schema_version": 1,
        "total_cycles": total,
        "config": cfg.to_dict(),
        "cores": cores,
        "dram": {
            "bytes": dram_bytes,
            "reads_completed": sim.reads_completed,
            "writes_completed": sim.writes_completed,
            "per_channel_bytes": sim.dram.per_channel_bytes(),
            "utilization": (dram_bytes / peak) if peak else 0.0,
        },
        "noc": {
            "bytes_moved": sim.noc.bytes_moved,
        },
        "requests": requests,
        "conservation": sim.conservation(),
    }
    if sim.scheduler.track_node_stats:
        report["nodes"] = _node_stats(sim)
    return report


def _node_stats(sim: Simulator) -> list[dict]:
    out = []
    busy: dict[tuple[str, str], dict[str, int]] = {}
    for core in sim.cores:
        for (req, node, unit), cyc in core.node_busy.items():
            slot = busy.setdefault((req, node), {})
            slot[unit] = slot.get(unit, 0) + cyc
    for (req, node), spans in sorted(sim.scheduler.node_spans.items()):
        bytes_ = sim.dram.node_bytes.get((req, node), 0)
        out.append({
            "request_id": req,
            "node_id": node,
            "spans": [list(s) for s in spans],
            "busy_cycles": dict(sorted(busy.get((req, node), {}).items())),
            "dram_bytes": bytes_,
        })
    return out


def report_json(report: dict, deterministic: bool = False) -> str:
    doc = dict(report)
    if not deterministic:
        doc["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return json.dumps(doc, indent=2, sort_keys=True)


def emit_report(sim: Simulator, out_dir: str, plots: bool = True,
                tbt_csv: bool = True) -> dict:
    """Write report.json plus CSV timelines and figures into out_dir."""
    report = build_report(sim)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report_json(report))
        fh.write("\n")
    _write_timelines(sim, out_dir)
    if tbt_csv:
        _write_tbt(sim, out_dir)
    if plots:
        _render_figures(sim, report, out_dir)
    return report


def _timeline_rows(sim: Simulator) -> list[tuple[int, list[float], float]]:
    total = sim.total_cycles()
    w = sim.cfg.timeline_window
    n_windows = -(-total // w) if total else 0
    rows = []
    peak_per_window = w * sim.cfg.dram.channels * sim.cfg.dram.peak_bytes_per_cycle
    for b in range(n_windows):
        span = min(w, total - b * w)
        core_frac = [min(1.0, core.timeline.get(b, 0) / span) for core in sim.cores]
        dram_frac = sim.dram_timeline.get(b, 0) / peak_per_window if peak_per_window else 0.0
        rows.append((b, core_frac, dram_frac))
    return rows


def _write_timelines(sim: Simulator, out_dir: str) -> None:
    rows = _timeline_rows(sim)
    path = os.path.join(out_dir, "utilization_timeline.csv")
    with open(path, "w", encoding="utf-8") as fh:
        heads = ",".join(f"core{c.core_id}_busy" for c in sim.cores)
        fh.write(f"window,start_cycle,{heads},dram_util\n")
        w = sim.cfg.timeline_window
        for b, core_frac, dram_frac in rows:
            cf = ",".join(f"{x:.6f}" for x in core_frac)
            fh.write(f"{b},{b * w},{cf},{dram_frac:.6f}\n")


def _write_tbt(sim: Simulator, out_dir: str) -> None:
    for st in sim.scheduler.retired:
        samples = tbt_samples(st)
        if not samples:
            continue
        path = os.path.join(out_dir, f"tbt_{st.req.request_id}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("token,cycles\n")
            for i, s in enumerate(samples):
                fh.write(f"{i},{s}\n")


def _render_figures(sim: Simulator, report: dict, out_dir: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _timeline_rows(sim)
    if rows:
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
        xs = [b * sim.cfg.timeline_window for b, _, _ in rows]
        for i, core in enumerate(sim.cores):
            ax1.plot(xs, [r[1][i] for r in rows], label=f"core {core.core_id}")
        ax1.set_ylabel("core busy fraction")
        ax1.set_ylim(0, 1.05)
        ax1.legend(loc="upper right", fontsize=8)
        ax2.plot(xs, [r[2] for r in rows], color="tab:red")
        ax2.set_ylabel("DRAM utilization")
        ax2.set_xlabel("cycle")
        ax2.set_ylim(0, 1.05)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "utilization.png"), dpi=120)
        plt.close(fig)

    all_samples = [(st.req.request_id, tbt_samples(st))
                   for st in sim.scheduler.retired]
    all_samples = [(rid, s) for rid, s in all_samples if s]
    if all_samples:
        fig, ax = plt.subplots(figsize=(7, 4))
        for rid, samples in all_samples:
            ax.hist(samples, bins=40, alpha=0.6, label=rid)
        ax.set_xlabel("time between tokens (cycles)")
        ax.set_ylabel("tokens")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "tbt_hist.png"), dpi=120)
        plt.close(fig)
