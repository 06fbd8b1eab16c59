"""Six-row ablation over seeds; writes ablation.csv and verdict.txt under the report dir.

    python scripts/run_ablation.py scripts/configs/desk.json
"""

import sys

from osparse.cli import main

if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit("usage: run_ablation.py <config.json> [--seed N]")
    config, rest = sys.argv[1], sys.argv[2:]
    code = main(["gen-data", "--config", config, *rest])
    sys.exit(code or main(["ablate", "--config", config, *rest]))
