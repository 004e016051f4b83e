"""Run the acceptance suite and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py            # all nine
    python3 scripts/run_acceptance.py 3 8        # a subset
"""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    selected = sys.argv[1:]
    cmd = [sys.executable, "-m", "pytest", str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]
    if selected:
        cmd += ["-k", " or ".join(f"criterion_{n}_" for n in selected)]
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith("criterion ")]
    print("\n".join(lines) if lines else proc.stdout + proc.stderr)
    sys.exit(proc.returncode)


if __name__ == "__main__":
    main()
