"""
Structural properties and the command line
==========================================

The property suites check the algebra behind the framework: trivial masks
that reproduce the ideal MMSE filter, mask conversion rules that keep GEV
filters unchanged, and the equivalence of max and min GEV formulations.
The same suites are reachable as ``maskbf properties --suite ...``.
"""

import tempfile
from pathlib import Path

from maskbf.cli import main
from maskbf.properties import run_properties

report = run_properties(["appendixB", "appendixC", "equivalence"])
print("\n".join(report.lines()))
print("all passed:", report.passed)

# a tiny experiment plan through the command line, with curves
with tempfile.TemporaryDirectory() as tmp:
    main(["run", "--variations", "INV-NS", "MinGEV-NO", "--g", "1", "2",
          "--duration", "0.5", "--iterations", "60", "--out", tmp, "--curves"])
    print(Path(tmp, "table.csv").read_text())
