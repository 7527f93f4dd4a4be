#!/usr/bin/env python3
"""
Generate an HTML report of the numbers the tests recorded.

Reads test_details.json (written by conftest.py at the end of every session)
and renders, per test:
- outcome, markers and duration
- the docstring (the "Steps:" lists read as a test plan)
- the asserted conditions
- every metric attached through the ``recorder`` fixture
"""
import argparse
import html
import json
from datetime import datetime
from pathlib import Path

OUTCOME_COLORS = {"passed": "#28a745", "failed": "#dc3545", "skipped": "#ffc107", "error": "#dc3545"}


def load_test_details(json_path: str) -> dict:
    if not Path(json_path).exists():
        raise FileNotFoundError(f"Test details JSON not found: {json_path}")
    with open(json_path, "r", encoding="utf-8") as f:
        return json.load(f)


def format_metric(value, max_items: int = 12) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, list):
        flat = value if all(not isinstance(v, list) for v in value) else json.dumps(value)
        if isinstance(flat, str):
            return flat if len(flat) < 400 else flat[:400] + " ..."
        shown = ", ".join(format_metric(v) for v in flat[:max_items])
        return f"[{shown}{', ...' if len(flat) > max_items else ''}]"
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True, default=str)
    return str(value)


def render_test(test: dict) -> str:
    color = OUTCOME_COLORS.get(test.get("outcome"), "#6c757d")
    parts = [
        '<div class="test">',
        f'<h3><span style="color:{color}">{html.escape(test.get("outcome", "?").upper())}</span> '
        f'{html.escape(test.get("test_name", ""))}</h3>',
        f'<p class="meta">markers: {html.escape(", ".join(test.get("markers", [])) or "none")} '
        f'&nbsp; duration: {test.get("duration", 0.0):.3f}s</p>',
    ]
    if test.get("docstring"):
        parts.append(f'<pre class="doc">{html.escape(test["docstring"].strip())}</pre>')
    metrics = test.get("metrics") or {}
    if metrics:
        parts.append("<table><thead><tr><th>metric</th><th>value</th></tr></thead><tbody>")
        for key in sorted(metrics):
            parts.append(f"<tr><td>{html.escape(key)}</td><td><code>{html.escape(format_metric(metrics[key]))}</code></td></tr>")
        parts.append("</tbody></table>")
    if test.get("assertions"):
        parts.append("<ul>")
        parts.extend(f"<li><code>{html.escape(a['condition'])}</code></li>" for a in test["assertions"])
        parts.append("</ul>")
    if test.get("failure_message"):
        parts.append(f'<pre class="fail">{html.escape(test["failure_message"])}</pre>')
    parts.append("</div>")
    return "\n".join(parts)


def generate_html(details: dict, only_metrics: bool = False) -> str:
    tests = details.get("tests", [])
    if only_metrics:
        tests = [t for t in tests if t.get("metrics")]
    counts = {}
    for t in details.get("tests", []):
        counts[t.get("outcome")] = counts.get(t.get("outcome"), 0) + 1
    summary = " &nbsp; ".join(f"<strong>{html.escape(str(k))}:</strong> {v}" for k, v in sorted(counts.items()))
    head = [
        "<html><head><meta charset=\"utf-8\"><title>sa_lab test metrics</title>",
        "<style>body{font-family:Arial,Helvetica,sans-serif;padding:20px}.test{border-bottom:1px solid #ddd;padding:8px 0}"
        ".meta{color:#666;font-size:90%}table{border-collapse:collapse}th,td{border:1px solid #ddd;padding:4px 8px}"
        "th{background:#f4f4f4}pre.doc{background:#f8f8f8;padding:6px}pre.fail{background:#fdecea;padding:6px;white-space:pre-wrap}</style>",
        "</head><body>",
        "<h1>sa_lab test metrics</h1>",
        f"<p>session: {html.escape(str(details.get('timestamp', '')))} &nbsp; exit status: {details.get('exit_status')} "
        f"&nbsp; generated: {datetime.now().isoformat(timespec='seconds')}</p>",
        f"<p>{summary}</p>",
    ]
    return "\n".join(head + [render_test(t) for t in tests] + ["</body></html>"])


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--details", default="reports/test_details.json", help="Path to test_details.json")
    parser.add_argument("--out", default="reports/metrics_report.html", help="Output HTML path")
    parser.add_argument("--only-metrics", action="store_true", help="skip tests that recorded no metrics")
    args = parser.parse_args()

    details = load_test_details(args.details)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(generate_html(details, args.only_metrics), encoding="utf-8")
    print(f"Generated metrics report: {out}")


if __name__ == "__main__":
    main()
