"""Markdown rendering of the collated report."""

from __future__ import annotations

TASK_TITLES = {"bacteria": "Bacteria", "fungi": "Fungi", "amoeba": "Amoeba",
               "sex": "Sex", "age": "Age"}
METRIC_TITLES = {"acc": "ACC", "balanced_acc": "BA", "f1": "F1", "precision": "Precision",
                 "recall": "Recall", "auroc": "AUROC", "mae": "MAE"}


def fmt_count(x) -> str:
    """Averaged counts: up to 4 decimals, trailing zeros dropped (318.4, 14.8, 12)."""
    s = f"{float(x):.4f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def fmt_stat(x) -> str:
    return "-" if x is None or x == "-" else f"{float(x):.4f}"


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return out


def render_markdown(report: dict) -> str:
    lines = ["# Cross-validation report", ""]
    lines.append(f"Folds evaluated: {', '.join(str(f) for f in report['folds'])}. "
                 f"Threshold mode: {report['threshold_mode']}.")
    lines.append("")

    metrics = report.get("metrics")
    if metrics:
        lines += ["## Metrics (mean and 95% normal CI across folds)", ""]
        rows = []
        for head, by_metric in metrics.items():
            for m, s in by_metric.items():
                rows.append([TASK_TITLES.get(head, head), METRIC_TITLES.get(m, m), fmt_stat(s["mean"]),
                             fmt_stat(s["ci_low"]), fmt_stat(s["ci_high"]), s["excluded"]])
        lines += _table(["Task", "Metric", "Mean", "CI low", "CI high", "Excluded folds"], rows)
        lines.append("")

    if report.get("table_iii"):
        lines += ["## Averaged confusion matrices", ""]
        for head, t in report["table_iii"].items():
            lines.append(f"**{TASK_TITLES.get(head, head)}** (rows actual, columns predicted)")
            lines.append("")
            rows = [[name] + [fmt_count(v) for v in row] for name, row in zip(t["rows"], t["matrix"])]
            lines += _table(["Actual"] + t["columns"], rows)
            lines.append("")

    if report.get("table_iv"):
        t = report["table_iv"]
        lines += ["## Averaged joint confusion matrix", "", "Rows actual, columns predicted.", ""]
        rows = [[name] + [fmt_count(v) for v in row] for name, row in zip(t["labels"], t["matrix"])]
        lines += _table(["Actual"] + t["labels"], rows)
        lines.append("")

    if report.get("table_v"):
        t = report["table_v"]
        lines += ["## Corrected p-values by subgroup", ""]
        header = ["Metric"] + [f"{TASK_TITLES[c['task']]} {c['attribute']}" for c in t["columns"]]
        rows = [[r["metric"]] + [fmt_stat(v) for v in r["cells"]] for r in t["rows"]]
        lines += _table(header, rows)
        lines.append("")
    return "\n".join(lines)
