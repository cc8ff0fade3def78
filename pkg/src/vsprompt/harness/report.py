"""Aggregate results CSVs into per-speaker, summary and parameter tables."""
from __future__ import annotations

import statistics
from pathlib import Path

from .experiment import SCHEMA_VERSION, read_csv, write_csv


class ReportError(ValueError):
    pass


def collect(paths) -> list[dict]:
    """Rows from every given results file (directories contribute ``**/results*.csv``)."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("results*.csv")))
        elif p.is_file():
            files.append(p)
        else:
            raise ReportError(f"no such results file or directory: {p}")
    if not files:
        raise ReportError("no results files found")
    rows, digests = [], {}
    for f in files:
        for r in read_csv(f):
            if str(r.get("schema_version")) != str(SCHEMA_VERSION):
                raise ReportError(f"{f}: schema version {r.get('schema_version')!r}, expected {SCHEMA_VERSION}")
            digests.setdefault(r["config_digest"], f)
            rows.append(r)
    if len(digests) > 1:
        listed = ", ".join(f"{d} ({f})" for d, f in sorted(digests.items()))
        raise ReportError(f"results come from different configs: {listed}")
    return rows


def _variant(r: dict) -> tuple:
    return r["method"], r["budget_label"], r["pad_layers"], r["cat_length"]


def _f(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def summarize(rows: list[dict]) -> dict[str, list[dict]]:
    speaker_rows = [r for r in rows if r["row_kind"] == "speaker"]
    mean_rows = [r for r in rows if r["row_kind"] == "mean"]
    speakers = sorted({int(r["speaker"]) for r in speaker_rows})
    order = []
    for r in speaker_rows:
        if _variant(r) not in order:
            order.append(_variant(r))

    per_speaker = []
    for v in order:
        rs = [r for r in speaker_rows if _variant(r) == v]
        row = dict(zip(("method", "budget", "pad_layers", "cat_length"), v))
        for s in speakers:
            vals = [float(r["accuracy"]) for r in rs if int(r["speaker"]) == s]
            row[f"speaker_{s}"] = _f(statistics.fmean(vals)) if vals else ""
        row["mean"] = _f(statistics.fmean(float(r["accuracy"]) for r in rs))
        per_speaker.append(row)

    summary, params = [], []
    for v in order:
        ms = [r for r in mean_rows if _variant(r) == v]
        acc = [float(r["accuracy"]) for r in ms]
        base = [float(r["baseline_accuracy"]) for r in ms]
        mean_acc, mean_base = statistics.fmean(acc), statistics.fmean(base)
        delta = mean_acc - mean_base
        summary.append({
            "method": v[0], "budget": v[1], "pad_layers": v[2], "cat_length": v[3], "seeds": len(ms),
            "accuracy_mean": _f(mean_acc), "accuracy_median": _f(statistics.median(acc)),
            "baseline": _f(mean_base), "improvement": _f(delta),
            "relative_improvement_pct": _f(100.0 * delta / abs(mean_base)) if mean_base else "",
        })
        ratio = float(ms[0]["ratio"])
        entry = {"method": v[0], "pad_layers": v[2], "cat_length": v[3],
                 "trainable_params": ms[0]["trainable_params"], "full_params": ms[0]["full_params"],
                 "ratio_pct": f"{100.0 * ratio:.3f}"}
        if entry not in params:
            params.append(entry)
    return {"per_speaker": per_speaker, "summary": summary, "params": params}


def render(table: list[dict]) -> str:
    if not table:
        return "(empty)\n"
    cols = list(table[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in table)) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).ljust(width[c]) for c in cols) for r in table]
    return "\n".join(l.rstrip() for l in lines) + "\n"


def write_report(paths, out_dir) -> Path:
    tables = summarize(collect(paths))
    out = Path(out_dir)
    text = []
    for name, table in tables.items():
        if table:
            write_csv(out / f"report_{name}.csv", list(table[0]), table)
        text.append(f"== {name}\n{render(table)}")
    path = out / "report.txt"
    path.write_text("\n".join(text), encoding="utf-8")
    return path
