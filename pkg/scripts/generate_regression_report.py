#!/usr/bin/env python3
"""Generate a concise regression HTML report from pytest JUnit XML output.

Usage:
    python scripts/generate_regression_report.py --junit reports/junit.xml --out reports/regression_report.html

The script collects total/passed/failed/skipped counts, lists failed tests with messages and tracebacks,
and adds triage notes for the numerical checks (statistical tolerances, seeds, scale).
"""
import argparse
import html
import os
import xml.etree.ElementTree as ET

# substrings of test names whose failures are statistical rather than logical
STATISTICAL = ("coverage", "slope", "scaling", "variance", "green_kubo", "monte_carlo", "balance", "forget", "richardson")


def parse_junit(junit_path: str):
    if not os.path.exists(junit_path):
        raise FileNotFoundError(f"JUnit XML not found: {junit_path}")

    root = ET.parse(junit_path).getroot()
    # junit xml may have <testsuite> or <testsuites>
    suites = [root] if root.tag == "testsuite" else list(root.findall("testsuite"))

    total = failures = errors = skipped = 0
    failed_cases = []
    for s in suites:
        total += int(s.attrib.get("tests", 0))
        failures += int(s.attrib.get("failures", 0))
        errors += int(s.attrib.get("errors", 0))
        skipped += int(s.attrib.get("skipped", 0) or s.attrib.get("skips", 0) or 0)

        for case in s.findall("testcase"):
            fail = case.find("failure")
            err = case.find("error")
            if fail is None and err is None:
                continue
            node = fail if fail is not None else err
            name = case.attrib.get("name", "")
            failed_cases.append({
                "name": name,
                "classname": case.attrib.get("classname"),
                "time": case.attrib.get("time"),
                "message": node.attrib.get("message", ""),
                "content": node.text or "",
                "type": "failure" if fail is not None else "error",
                "statistical": any(key in name for key in STATISTICAL),
            })

    return {
        "total": total,
        "passed": total - failures - errors - skipped,
        "failures": failures,
        "errors": errors,
        "skipped": skipped,
        "failed_cases": failed_cases,
    }


def recommendations(summary: dict) -> list[str]:
    failed = summary["failed_cases"]
    if not failed:
        return [
            "All tests passed. Keep this run's junit.xml and test_details.json as the numerical baseline.",
            "Acceptance runs are separate (pytest -c pytest.acceptance.ini); run them before changing an estimator.",
        ]
    recs = []
    if any(c["type"] == "error" for c in failed):
        recs.append("Collection or fixture errors usually mean a broken import or config; fix these before reading numerical failures.")
    if any(c["statistical"] for c in failed):
        recs.append("Statistical checks failed: change the seed in the failing test to tell a biased estimator from an unlucky draw.")
    if any(not c["statistical"] for c in failed):
        recs.append("Exact checks failed (closed-form roots, Poisson identities, schemas, exit codes): these are deterministic regressions.")
    recs.append("For each defect, add a regression test with the smallest problem that reproduces it.")
    return recs


def generate_html(summary: dict, junit_path: str, pytest_html_path: str = None):
    html_parts = [
        "<html><head><meta charset=\"utf-8\"><title>sa_lab regression report</title>",
        "<style>body{font-family:Arial,Helvetica,sans-serif;padding:20px}h1{color:#222}table{border-collapse:collapse;width:100%}th,td{border:1px solid #ddd;padding:8px}th{background:#f4f4f4}</style>",
        "</head><body>",
        "<h1>sa_lab regression report</h1>",
        f"<p><strong>Total tests:</strong> {summary['total']} &nbsp; <strong>Passed:</strong> {summary['passed']} &nbsp; "
        f"<strong>Failures:</strong> {summary['failures']} &nbsp; <strong>Errors:</strong> {summary['errors']} &nbsp; "
        f"<strong>Skipped:</strong> {summary['skipped']}</p>",
        f"<p><strong>JUnit XML:</strong> {html.escape(junit_path)}</p>",
    ]
    if pytest_html_path:
        html_parts.append(f"<p><strong>PyTest HTML:</strong> {html.escape(pytest_html_path)}</p>")

    html_parts.append("<h2>Failures</h2>")
    if not summary["failed_cases"]:
        html_parts.append("<p>No failing tests detected.</p>")
    else:
        html_parts.append("<table><thead><tr><th>Test</th><th>Module</th><th>Kind</th><th>Message / Trace</th></tr></thead><tbody>")
        for fcase in summary["failed_cases"]:
            kind = f"{fcase['type']} ({'statistical' if fcase['statistical'] else 'exact'})"
            msg = html.escape((fcase["message"] + "\n\n" + fcase["content"]).strip())
            html_parts.append(
                "<tr>"
                f"<td>{html.escape(fcase['name'])}</td>"
                f"<td>{html.escape(fcase.get('classname') or '')}</td>"
                f"<td>{html.escape(kind)}</td>"
                f"<td><pre style=\"white-space:pre-wrap;max-height:300px;overflow:auto\">{msg}</pre></td>"
                "</tr>"
            )
        html_parts.append("</tbody></table>")

    html_parts.append("<h2>Triage notes</h2><ul>")
    html_parts.extend(f"<li>{html.escape(r)}</li>" for r in recommendations(summary))
    html_parts.append("</ul></body></html>")
    return "\n".join(html_parts)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--junit", required=True, help="Path to junit xml file")
    parser.add_argument("--pytest-html", required=False, help="Path to pytest-html output (optional)")
    parser.add_argument("--out", required=True, help="Output HTML path")
    args = parser.parse_args()

    summary = parse_junit(args.junit)
    html_content = generate_html(summary, args.junit, args.pytest_html)

    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(html_content)

    print(f"Generated regression report: {args.out}")


if __name__ == "__main__":
    main()
