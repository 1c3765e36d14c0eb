"""Experiment table rendering: human-readable text and TSV export.

Reproduces the row/column structure of the shipped result tables
(interception, runtime violation, recovery, per-type detection,
ablation, override gate, latency, confusion) with mean+/-std cells, plus
a machine-readable TSV per table that round-trips through
``import_table``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

from .session import ViolationType

NA = "--"

TABLE_SPECS: dict[str, dict[str, Any]] = {
    "interception": {
        "title": "Unauthorized action interception (mean±std over seeds)",
        "rows": ["direct_execution", "static_rule", "capability_internal", "proposed"],
        "metrics": ["uair", "frr"],
    },
    "violation_monitoring": {
        "title": "Runtime violation monitoring (mean±std over seeds)",
        "rows": ["direct_execution", "static_rule", "capability_internal", "proposed"],
        "metrics": ["rvdr", "cef", "ucr"],
    },
    "recovery": {
        "title": "Recovery and rollback (mean±std over seeds)",
        "rows": ["direct_execution", "static_rule", "capability_internal", "proposed"],
        "metrics": ["rsr", "rbsr", "mrt", "rpc"],
    },
    "ablation": {
        "title": "Component ablation (mean±std over seeds)",
        "rows": ["proposed", "ablate_admit", "ablate_policy", "ablate_watch", "ablate_recov", "ablate_human"],
        "metrics": ["uair", "rvdr", "ucr", "rsr", "rpc"],
    },
    "override_gate": {
        "title": "Human override gate (mean±std over seeds)",
        "rows": ["override_on", "override_off"],
        "metrics": ["block_rate", "incorrect_allow"],
    },
}


def _cell(agg: Optional[tuple[float, float]]) -> str:
    if agg is None:
        return NA
    mean, std = agg
    return f"{mean:.3f}±{std:.3f}"


def render_variant_table(result, name: str) -> tuple[str, str]:
    """(human text, tsv) for one variant-by-metric table."""
    spec = TABLE_SPECS[name]
    metrics = spec["metrics"]
    rows = [r for r in spec["rows"] if any((r, s) in result.cells for s in result.config.seeds)]
    header = ["method"] + [m.upper() for m in metrics]
    lines = [[r] + [_cell(result.aggregate(r, m)) for m in metrics] for r in rows]
    text = _render_text(spec["title"], header, lines)
    tsv = _render_tsv(header, lines)
    return text, tsv


def render_per_type_table(result, variant: str = "proposed") -> tuple[str, str]:
    per_type = result.aggregate_per_type(variant)
    header = ["violation_type", "detection_rate"]
    lines = [[vt.value, _cell(per_type.get(vt.value))] for vt in ViolationType]
    text = _render_text(f"Per-violation-type detection, {variant} (mean±std over seeds)", header, lines)
    return text, _render_tsv(header, lines)


def render_confusion_table(result, variant: str = "proposed") -> tuple[str, str]:
    c = result.confusion_total(variant)
    header = ["decision", "actually_unauthorized", "actually_authorized"]
    lines = [
        ["blocked", f"{c['tp']} (TP)", f"{c['fp']} (FP)"],
        ["allowed", f"{c['fn']} (FN)", f"{c['tn']} (TN)"],
    ]
    text = _render_text(f"Governance decision confusion matrix, {variant} (all trials)", header, lines)
    return text, _render_tsv(header, lines)


def render_latency_table(latency: dict[str, Optional[dict[str, float]]]) -> tuple[str, str]:
    header = ["component", "mean_us", "std_us", "p50_us", "p99_us", "n"]
    order = ["admission", "policy_guard", "watcher_step", "recovery", "total_pre_exec"]
    lines = []
    for comp in order:
        stats = latency.get(comp)
        if stats is None:
            lines.append([comp, NA, NA, NA, NA, "0"])
        else:
            lines.append(
                [comp]
                + [f"{stats[k]:.2f}" for k in ("mean", "std", "p50", "p99")]
                + [str(stats["n"])]
            )
    text = _render_text("Governance-layer per-action latency (µs)", header, lines)
    return text, _render_tsv(header, lines)


def render_t_test_table(result) -> tuple[str, str]:
    header = ["metric", "t", "p", "seeds"]
    lines = [[t.metric, f"{t.t:.3f}", f"{t.p:.3g}", str(t.seeds)] for t in result.t_tests]
    text = _render_text("Paired t-tests: proposed vs capability_internal", header, lines)
    return text, _render_tsv(header, lines)


def _render_text(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [title, fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    out += [fmt.format(*row) for row in rows]
    return "\n".join(out) + "\n"


def _render_tsv(header: list[str], rows: list[list[str]]) -> str:
    return "\n".join("\t".join(str(c) for c in row) for row in [header] + rows) + "\n"


def import_table(tsv: str) -> list[dict[str, str]]:
    """Parse an exported TSV back into row dicts (round-trip check)."""
    lines = [ln for ln in tsv.splitlines() if ln.strip()]
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]


def emit_tables(result, out_dir, latency: Optional[dict] = None) -> list[str]:
    """Write every table as .txt and .tsv under out_dir; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    def write(name: str, text: str, tsv: str) -> None:
        (out / f"{name}.txt").write_text(text)
        (out / f"{name}.tsv").write_text(tsv)
        written.extend([str(out / f"{name}.txt"), str(out / f"{name}.tsv")])

    for name in TABLE_SPECS:
        text, tsv = render_variant_table(result, name)
        write(name, text, tsv)
    text, tsv = render_per_type_table(result)
    write("per_type_detection", text, tsv)
    text, tsv = render_confusion_table(result)
    write("confusion", text, tsv)
    if result.t_tests:
        text, tsv = render_t_test_table(result)
        write("t_tests", text, tsv)
    lat = latency if latency is not None else result.latency
    if lat is not None:
        text, tsv = render_latency_table(lat)
        write("latency", text, tsv)
    return written
