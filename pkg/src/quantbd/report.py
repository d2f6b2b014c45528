"""Render experiment records as markdown tables, csv, json and bar charts."""

from __future__ import annotations

import csv
import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import ExperimentRecord, SchemeName

FORMATS = ("markdown", "csv", "json", "plots")

SCHEME_LABELS = {
    SchemeName.FP32.value: "FP32",
    SchemeName.INT8_DYNAMIC.value: "INT8",
    SchemeName.INT4_SIM.value: "INT4",
}
_SCHEME_ORDER = list(SCHEME_LABELS)

CSV_FIELDS = ("dataset_id", "scheme", "defense_id", "seed", "detected", "error",
              "clean_accuracy", "attack_success_rate", "wall_time_seconds")


def _glyphs(ascii_only: bool) -> tuple[str, str]:
    return ("Y", "N") if ascii_only else ("✓", "✗")


def _ordered(values: Iterable[str], order: Sequence[str] = ()) -> list[str]:
    seen = list(OrderedDict.fromkeys(values))
    ranked = [v for v in order if v in seen]
    return ranked + [v for v in seen if v not in ranked]


def _rows(records) -> list[dict]:
    """Flatten records (or csv rows) to plain dicts with CSV_FIELDS keys."""
    out = []
    for r in records:
        if isinstance(r, ExperimentRecord):
            out.append({
                "dataset_id": r.dataset_id, "scheme": r.scheme.value,
                "defense_id": r.defense_id.value, "seed": r.seed, "detected": r.detected,
                "error": r.error or "", "clean_accuracy": r.metrics.clean_accuracy,
                "attack_success_rate": r.metrics.attack_success_rate,
                "wall_time_seconds": r.wall_time_seconds,
            })
        else:
            out.append(dict(r))
    return out


def detection_rates(records) -> dict[str, tuple[int, int]]:
    """Per scheme: (number of detected cells, number of cells)."""
    counts: dict[str, list[int]] = {}
    for row in _rows(records):
        c = counts.setdefault(row["scheme"], [0, 0])
        c[0] += bool(row["detected"])
        c[1] += 1
    return {s: (counts[s][0], counts[s][1]) for s in _ordered(counts, _SCHEME_ORDER)}


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def detection_grid(records, ascii_only: bool = False) -> str:
    rows = _rows(records)
    yes, no = _glyphs(ascii_only)
    datasets = _ordered(r["dataset_id"] for r in rows)
    schemes = _ordered((r["scheme"] for r in rows), _SCHEME_ORDER)
    defenses = _ordered(r["defense_id"] for r in rows)
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["dataset_id"], r["scheme"], r["defense_id"]), []).append(r)

    lines = ["| Dataset | Quant. | " + " | ".join(defenses) + " |",
             "|---|---|" + "---|" * len(defenses)]
    for d in datasets:
        for s in schemes:
            if not any((d, s, x) in cells for x in defenses):
                continue
            out = []
            for x in defenses:
                group = cells.get((d, s, x), [])
                if not group:
                    out.append("-")
                elif all(g["error"] for g in group):
                    out.append("ERR")
                elif len(group) == 1:
                    out.append(yes if group[0]["detected"] else no)
                else:
                    out.append(f"{sum(bool(g['detected']) for g in group)}/{len(group)}")
            lines.append(f"| {d} | {SCHEME_LABELS.get(s, s)} | " + " | ".join(out) + " |")
    return "\n".join(lines)


def quality_grid(records) -> str:
    rows = _rows(records)
    datasets = _ordered(r["dataset_id"] for r in rows)
    schemes = _ordered((r["scheme"] for r in rows), _SCHEME_ORDER)
    # one metric pair per (dataset, scheme, seed); average over seeds
    pairs: dict[tuple, dict] = {}
    for r in rows:
        pairs.setdefault((r["dataset_id"], r["scheme"], r["seed"]), r)

    def mean(d, s, key):
        vals = [float(p[key]) for (pd, ps, _), p in pairs.items() if pd == d and ps == s]
        return _pct(np.mean(vals)) if vals else "-"

    lines = ["| Dataset | Metric | " + " | ".join(SCHEME_LABELS.get(s, s) for s in schemes) + " |",
             "|---|---|" + "---|" * len(schemes)]
    for d in datasets:
        lines.append(f"| {d} | Clean Acc (%) | "
                     + " | ".join(mean(d, s, "clean_accuracy") for s in schemes) + " |")
        lines.append(f"| {d} | ASR (%) | "
                     + " | ".join(mean(d, s, "attack_success_rate") for s in schemes) + " |")
    return "\n".join(lines)


def nc_norm_tables(records: Sequence[ExperimentRecord]) -> str:
    """One table per (dataset, seed): per-class mask norms for each scheme."""
    groups: dict[tuple, list[ExperimentRecord]] = {}
    for r in records:
        if (isinstance(r, ExperimentRecord) and r.defense_id.value == "NC"
                and r.verdict is not None and "norms" in r.verdict.diagnostics):
            groups.setdefault((r.dataset_id, r.seed), []).append(r)
    blocks = []
    for (dataset, seed), group in groups.items():
        group.sort(key=lambda r: _SCHEME_ORDER.index(r.scheme.value))
        k = max(len(r.verdict.diagnostics["norms"]) for r in group)
        head = "| Quant. | " + " | ".join(f"Class {c}" for c in range(k)) + " | Median | MAD |"
        lines = [f"NC trigger norms, {dataset} (seed {seed})", "", head,
                 "|---|" + "---|" * (k + 2)]
        for r in group:
            diag = r.verdict.diagnostics
            flagged = set(diag.get("flagged_classes", []))
            norms = [f"**{n:.1f}**" if c in flagged else f"{n:.1f}"
                     for c, n in enumerate(diag["norms"])]
            lines.append(f"| {SCHEME_LABELS.get(r.scheme.value, r.scheme.value)} | "
                         + " | ".join(norms) + f" | {diag['median']:.1f} | {diag['mad']:.1f} |")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def render_markdown(records, ascii_only: bool = False) -> str:
    rates = detection_rates(records)
    parts = ["# Detection results", "", detection_grid(records, ascii_only), "",
             "Aggregate detection rate: " + ", ".join(
                 f"{SCHEME_LABELS.get(s, s)} {_pct(d / n)}% ({d}/{n})" for s, (d, n) in rates.items()),
             "", "# Model quality", "", quality_grid(records)]
    errors = [r for r in _rows(records) if r["error"]]
    if errors:
        parts += ["", "# Cell errors", ""]
        parts += [f"- {e['dataset_id']} / {e['scheme']} / {e['defense_id']} / seed {e['seed']}: "
                  f"{e['error']}" for e in errors]
    norms = nc_norm_tables(records)
    if norms:
        parts += ["", "# Neural Cleanse norms", "", norms]
    return "\n".join(parts) + "\n"


def write_csv(records, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in _rows(records):
            writer.writerow({k: row[k] for k in CSV_FIELDS})
    return path


def read_csv(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row["seed"] = int(row["seed"])
            row["detected"] = row["detected"] == "True"
            for key in ("clean_accuracy", "attack_success_rate", "wall_time_seconds"):
                row[key] = float(row[key])
            rows.append(row)
    return rows


def _plot(records, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _rows(records)
    rates = detection_rates(rows)
    schemes = list(rates)
    defenses = _ordered(r["defense_id"] for r in rows)
    labels = [SCHEME_LABELS.get(s, s) for s in schemes]

    per_defense = np.zeros((len(defenses), len(schemes)))
    for i, dfn in enumerate(defenses):
        sub = detection_rates([r for r in rows if r["defense_id"] == dfn])
        for j, s in enumerate(schemes):
            d, n = sub.get(s, (0, 0))
            per_defense[i, j] = d / n if n else np.nan

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10.5, 3.8))
    ax0.bar(labels, [100 * d / n for d, n in rates.values()], color="0.35")
    ax0.set_ylabel("detection rate (%)")
    ax0.set_title("all defenses")
    width = 0.8 / len(defenses)
    x = np.arange(len(schemes))
    for i, dfn in enumerate(defenses):
        ax1.bar(x + (i - (len(defenses) - 1) / 2) * width, 100 * per_defense[i], width, label=dfn)
    ax1.set_xticks(x, labels)
    ax1.set_title("per defense")
    ax1.legend(fontsize=8, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    for ax in (ax0, ax1):
        ax.set_ylim(0, 105)
    fig.tight_layout()
    png = out_dir / "detection_rate.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)

    table = out_dir / "detection_rate.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "defense_id", "detected", "total", "rate"])
        for s, (d, n) in rates.items():
            writer.writerow([s, "ALL", d, n, d / n])
        for i, dfn in enumerate(defenses):
            sub = detection_rates([r for r in rows if r["defense_id"] == dfn])
            for s, (d, n) in sub.items():
                writer.writerow([s, dfn, d, n, d / n])
    return [png, table]


def emit_report(records, fmt: str, out_dir: str | os.PathLike,
                ascii_only: bool = False) -> list[Path]:
    """Write the report in ``fmt`` (one of FORMATS, or "all") and return the files."""
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    if fmt != "all" and fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; valid: {', '.join(FORMATS)}, all")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in (FORMATS if fmt == "all" else (fmt,)):
        if f == "markdown":
            path = out_dir / "report.md"
            path.write_text(render_markdown(records, ascii_only), encoding="utf-8")
            written.append(path)
        elif f == "csv":
            written.append(write_csv(records, out_dir / "records.csv"))
        elif f == "json":
            path = out_dir / "report.json"
            doc = {
                "detection_rates": {s: {"detected": d, "total": n, "rate": d / n}
                                    for s, (d, n) in detection_rates(records).items()},
                "records": [r.to_dict() if isinstance(r, ExperimentRecord) else r for r in records],
            }
            path.write_text(json.dumps(doc, indent=2))
            written.append(path)
        else:
            written += _plot(records, out_dir)
    return written
