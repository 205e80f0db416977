"""CSV output and the run summary recomputed from those CSVs."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

from .metrics import RunResult

TRANSFERS_HEADER = ["file_id", "class", "src", "dst", "size_bytes", "t_start_s", "t_end_s"]
LINKS_HEADER = ["t_window_end_s", "link_id", "avg_rate_bps", "utilization"]
CPU_HEADER = ["t_window_end_s", "center_id", "cpu_utilization"]
JOBS_HEADER = ["job_id", "type", "center", "t_submit_s", "t_start_s", "t_end_s", "exported"]
ACTIVITIES_HEADER = ["activity", "center", "trigger_time_s", "completion_time_s", "bytes_moved"]

OUTPUT_FILES = ("transfers.csv", "links.csv", "cpu.csv", "jobs.csv", "activities.csv", "summary.txt")


def _t(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def _bytes(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.6f}"


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_outputs(result: RunResult, outdir: str | Path, resolved_config: str | None = None) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "transfers.csv", TRANSFERS_HEADER,
           ([r.file_id, r.cls, r.src, r.dst, _bytes(r.size), _t(r.t_start), _t(r.t_end)]
            for r in result.transfers))
    _write(out / "links.csv", LINKS_HEADER,
           ([_t(s.t_end), s.link_id, f"{s.avg_rate_bps:.6f}", f"{s.utilization:.6f}"] for s in result.links))
    _write(out / "cpu.csv", CPU_HEADER,
           ([_t(s.t_end), s.center, f"{s.utilization:.6f}"] for s in result.cpu))
    _write(out / "jobs.csv", JOBS_HEADER,
           ([j.id, j.type, j.center, _t(j.submit_time), _t(j.t_start), _t(j.t_end), int(j.exported)]
            for j in result.jobs))
    _write(out / "activities.csv", ACTIVITIES_HEADER,
           ([a.activity, a.center, _t(a.trigger_time), _t(a.completion_time), _bytes(a.bytes_moved)]
            for a in result.activities))
    if resolved_config is not None:
        (out / "config.resolved.cfg").write_text(resolved_config)
    summary = summarize(out)
    (out / "summary.txt").write_text(format_summary(summary, result))
    return out


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------

def _read(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _stats(xs: list[float]) -> dict[str, float]:
    return {"count": len(xs), "mean": sum(xs) / len(xs), "min": min(xs), "max": max(xs)}


def dst_delivery_times(rows: list[dict[str, str]]) -> list[tuple[str, str, float]]:
    """(file_id, dst, seconds) for every DST copy, measured from its first hop.

    Relayed copies are chained back through the relay's own incoming hop, so a
    file forwarded T0 -> US1 -> JP counts from the start of the T0 -> US1 leg.
    """
    by_file: dict[str, dict[str, dict[str, str]]] = defaultdict(dict)
    for r in rows:
        if r["class"] == "DST":
            by_file[r["file_id"]][r["dst"]] = r
    out = []
    for fid in sorted(by_file):
        incoming = by_file[fid]
        for dst in sorted(incoming):
            r = incoming[dst]
            start = float(r["t_start_s"])
            node, seen = r["src"], {dst}
            while node in incoming and node not in seen:
                seen.add(node)
                start = float(incoming[node]["t_start_s"])
                node = incoming[node]["src"]
            out.append((fid, dst, float(r["t_end_s"]) - start))
    return out


def summarize(outdir: str | Path) -> dict:
    """Per-destination transfer times, activity latencies, link and CPU averages."""
    out = Path(outdir)
    transfers = _read(out / "transfers.csv")
    summary: dict = {"transfer_times": {}, "all_series": {}, "activities": {}, "links": {}, "cpu": {},
                     "jobs": {}, "notes": []}

    per: dict[str, dict[str, list[float]]] = {"RAW": defaultdict(list), "DST": defaultdict(list)}
    for r in transfers:
        if r["class"] == "RAW":
            per["RAW"][r["dst"]].append(float(r["t_end_s"]) - float(r["t_start_s"]))
    for _fid, dst, dt in dst_delivery_times(transfers):
        per["DST"][dst].append(dt)
    for cls in ("RAW", "DST"):
        if not per[cls]:
            summary["notes"].append(f"no {cls} transfers")
            continue
        summary["transfer_times"][cls] = {d: _stats(v) for d, v in sorted(per[cls].items())}
        allv = [x for v in per[cls].values() for x in v]
        summary["all_series"][cls] = _stats(allv)

    acts: dict[tuple[str, str], list[float]] = defaultdict(list)
    unfinished: dict[tuple[str, str], int] = defaultdict(int)
    moved: dict[tuple[str, str], float] = defaultdict(float)
    for a in _read(out / "activities.csv"):
        key = (a["activity"], a["center"])
        moved[key] += float(a["bytes_moved"])
        if a["completion_time_s"] == "":
            unfinished[key] += 1
        else:
            acts[key].append(float(a["completion_time_s"]) - float(a["trigger_time_s"]))
    for key in sorted(set(acts) | set(unfinished)):
        entry = _stats(acts[key]) if acts[key] else {"count": 0}
        entry["unfinished"] = unfinished[key]
        entry["bytes_moved"] = moved[key]
        summary["activities"][f"{key[0]}:{key[1]}"] = entry

    # window-weighted averages over the whole run
    for fname, idcol, cols, dest in (("links.csv", "link_id", ("avg_rate_bps", "utilization"), "links"),
                                     ("cpu.csv", "center_id", ("cpu_utilization",), "cpu")):
        last: dict[str, float] = {}
        acc: dict[str, list[float]] = {}
        for r in _read(out / fname):
            k = r[idcol]
            t = float(r["t_window_end_s"])
            w = t - last.get(k, 0.0)
            last[k] = t
            a = acc.setdefault(k, [0.0] * (len(cols) + 1))
            for i, c in enumerate(cols):
                a[i] += float(r[c]) * w
            a[-1] += w
        for k in sorted(acc):
            a = acc[k]
            summary[dest][k] = {c: (a[i] / a[-1] if a[-1] > 0 else 0.0) for i, c in enumerate(cols)}

    jobs: dict[str, dict[str, int]] = defaultdict(lambda: {"count": 0, "exported": 0})
    for j in _read(out / "jobs.csv"):
        jobs[j["type"]]["count"] += 1
        jobs[j["type"]]["exported"] += int(j["exported"])
    summary["jobs"] = dict(sorted(jobs.items()))
    return summary


def _fmt(x: float) -> str:
    if isinstance(x, int):
        return str(x)
    return "nan" if math.isnan(x) else f"{x:.6f}"


def format_summary(summary: dict, result: RunResult | None = None) -> str:
    lines: list[str] = []
    if result is not None:
        lines.append(f"scenario: {result.kind}")
        lines.append(f"duration_s: {result.duration:.6f}")
        for k, v in result.report.items():
            lines.append(f"{k}: {_fmt(v)}")
        lines.append("")
    for cls, table in summary["transfer_times"].items():
        label = "delivery time from first hop" if cls == "DST" else "hop time"
        lines.append(f"{cls} transfer times ({label}), seconds")
        lines.append(f"  {'dst':<10} {'count':>7} {'mean':>14} {'min':>14} {'max':>14}")
        for d, s in table.items():
            lines.append(f"  {d:<10} {s['count']:>7} {s['mean']:>14.6f} {s['min']:>14.6f} {s['max']:>14.6f}")
        s = summary["all_series"][cls]
        lines.append(f"  {'all':<10} {s['count']:>7} {s['mean']:>14.6f} {s['min']:>14.6f} {s['max']:>14.6f}")
        lines.append("")
    for note in summary["notes"]:
        lines.append(f"note: {note}")
    if summary["notes"]:
        lines.append("")
    if summary["activities"]:
        lines.append("activity latency, seconds")
        for k, s in summary["activities"].items():
            mean = f"{s['mean']:.6f}" if s["count"] else "-"
            lines.append(f"  {k:<24} runs={s['count']} unfinished={s['unfinished']} mean={mean} "
                         f"bytes={s['bytes_moved']:.0f}")
        lines.append("")
    if summary["links"]:
        lines.append("link average over the run")
        for k, s in summary["links"].items():
            lines.append(f"  {k:<28} {s['avg_rate_bps']:>18.6f} bps  util={s['utilization']:.6f}")
        lines.append("")
    if summary["cpu"]:
        lines.append("cpu utilization over the run")
        for k, s in summary["cpu"].items():
            lines.append(f"  {k:<28} {s['cpu_utilization']:.6f}")
        lines.append("")
    if summary["jobs"]:
        lines.append("jobs")
        for k, s in summary["jobs"].items():
            lines.append(f"  {k:<14} finished={s['count']} exported={s['exported']}")
        lines.append("")
    if result is not None:
        lines.append("audits")
        for name, problems in result.audits.items():
            lines.append(f"  {name}: {'ok' if not problems else f'{len(problems)} violations'}")
            for p in problems[:20]:
                lines.append(f"    {p}")
        lines.append("")
        if result.extra:
            lines.append("counters")
            for k, v in result.extra.items():
                lines.append(f"  {k}: {_fmt(v) if isinstance(v, float) else v}")
            lines.append("")
    return "\n".join(lines)
