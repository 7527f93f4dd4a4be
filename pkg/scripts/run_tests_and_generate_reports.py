#!/usr/bin/env python3
"""
Run the sa_lab test suite and generate HTML summaries from its results.

- Default run uses pytest.ini and writes:
  - reports/report.html (self-contained HTML)
  - reports/junit.xml (JUnit XML)
  - reports/test_details.json (per-test assertions and recorded metrics)
- --acceptance uses pytest.acceptance.ini and writes the same files under reports/acceptance/
- Generates:
  - regression_report.html (pass/fail summary and failure traces)
  - metrics_report.html (numbers each test recorded: slopes, coverages, residuals)

Exit code mirrors pytest's exit code.
"""
from __future__ import annotations
import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def run_pytest(ini: str, reports: Path, env: dict) -> int:
    reports.mkdir(parents=True, exist_ok=True)
    cmd = [sys.executable, "-m", "pytest", "-c", ini]
    print(f"Running: {' '.join(cmd)}")
    proc = subprocess.run(cmd, cwd=str(ROOT), env=env)
    return proc.returncode


def generate_regression_html(reports: Path) -> None:
    script = ROOT / "scripts" / "generate_regression_report.py"
    args = [sys.executable, str(script), "--junit", str(reports / "junit.xml"), "--out", str(reports / "regression_report.html")]
    if (reports / "report.html").exists():
        args += ["--pytest-html", str(reports / "report.html")]
    subprocess.run(args, cwd=str(ROOT), check=False)


def generate_metrics_html(reports: Path) -> None:
    script = ROOT / "scripts" / "generate_metrics_report.py"
    args = [sys.executable, str(script), "--details", str(reports / "test_details.json"), "--out", str(reports / "metrics_report.html")]
    subprocess.run(args, cwd=str(ROOT), check=False)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--acceptance", action="store_true", help="run the desk-scale acceptance suite instead")
    parser.add_argument("--scale", type=float, default=None, help="SA_LAB_ACCEPTANCE_SCALE for the acceptance suite")
    parser.add_argument("--threads", type=int, default=None, help="SA_LAB_THREADS")
    args = parser.parse_args()

    env = os.environ.copy()
    if args.acceptance:
        ini, reports = "pytest.acceptance.ini", ROOT / "reports" / "acceptance"
        env["REPORTS_DIR"] = str(reports)
    else:
        ini, reports = "pytest.ini", ROOT / "reports"
    if args.scale is not None:
        env["SA_LAB_ACCEPTANCE_SCALE"] = str(args.scale)
    if args.threads is not None:
        env["SA_LAB_THREADS"] = str(args.threads)

    code = run_pytest(ini, reports, env)
    # Tiny wait to ensure file flush
    time.sleep(0.2)
    generate_regression_html(reports)
    generate_metrics_html(reports)

    print("\nArtifacts:")
    for name in ["report.html", "junit.xml", "test_details.json", "regression_report.html", "metrics_report.html"]:
        p = reports / name
        print(f" - {p.relative_to(ROOT)} {'(missing)' if not p.exists() else ''}")

    return code


if __name__ == "__main__":
    sys.exit(main())
