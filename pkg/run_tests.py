#!/usr/bin/env python3
"""
Test runner script for the automated testing suite.

Runs the fast suite by default; `--slow` adds the acceptance-scale runs
(marked `slow`), `--only PATTERN` forwards a -k expression to pytest.
"""
import argparse
import os
import subprocess
import sys
from pathlib import Path


def run_tests(slow: bool = False, only: str = None, timeout: int = 3600) -> bool:
    """Execute the pytest suite and display results."""
    print("=" * 60)
    print("🧪 METASTABLE TEST SUITE EXECUTION")
    print("=" * 60)
    print()

    project_dir = Path(__file__).parent.absolute()
    os.chdir(project_dir)

    cmd = [sys.executable, "-m", "pytest", "-v"]
    if slow:
        # la marca por defecto en pyproject es "not slow"; se reemplaza
        cmd += ["-m", "slow or not slow"]
        print("📋 Including slow acceptance runs...")
    if only:
        cmd += ["-k", only]
    print()

    try:
        result = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)

        if result.stdout:
            print(result.stdout)
        if result.stderr:
            print("STDERR:", result.stderr, file=sys.stderr)

        print()
        print("=" * 60)
        if result.returncode == 0:
            print("✅ ALL TESTS PASSED!")
        else:
            print("❌ SOME TESTS FAILED! Please check the output above for details.")
        print("=" * 60)
        return result.returncode == 0

    except subprocess.TimeoutExpired:
        print("⏰ Test execution timed out!")
        return False
    except FileNotFoundError:
        print("❌ pytest not found! Please ensure the requirements are installed:")
        print("   pip install -r requirements.txt")
        return False


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the test suite")
    parser.add_argument("--slow", action="store_true", help="include acceptance-scale runs")
    parser.add_argument("--only", help="pytest -k expression")
    parser.add_argument("--timeout", type=int, default=3600)
    args = parser.parse_args()

    print("🚀 Starting Test Execution Script...")
    print()
    success = run_tests(args.slow, args.only, args.timeout)

    print("\n💡 Fast suite only: python -m pytest")
    print("💡 With slow runs:  python run_tests.py --slow")
    print()
    sys.exit(0 if success else 1)
