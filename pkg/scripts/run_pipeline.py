"""gen-data, train and eval (k-way then one-way) for one config, stopping at the first failure.

    python scripts/run_pipeline.py scripts/configs/smoke.json [--seed N]
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from osparse.cli import main


def run(config: Path, seed: int | None) -> int:
    extra = [] if seed is None else ["--seed", str(seed)]
    for cmd in ("gen-data", "train", "eval"):
        code = main([cmd, "--config", str(config), *extra])
        if code:
            return code
    # one-way metrics from the same checkpoint
    doc = json.loads(config.read_text())
    doc.setdefault("eval", {})["mode"] = "one-way"
    base = config.parent.resolve()
    for sec, keys in (("data", ("out_dir",)), ("paths", ("manifest", "checkpoints", "reports"))):
        for k in keys:
            v = doc.get(sec, {}).get(k)
            if v is not None and not Path(v).is_absolute():
                doc[sec][k] = str(base / v)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(doc, f)
    return main(["eval", "--config", f.name, *extra])


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("config", type=Path)
    p.add_argument("--seed", type=int)
    a = p.parse_args()
    sys.exit(run(a.config, a.seed))
