"""Grid against Monte Carlo for the shipped VG configurations.

Thin wrapper around ``levyobstacle crosscheck``; output goes to out/crosscheck_*.
"""
import sys
from pathlib import Path

from levyobstacle.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    status = 0
    for name in ("vg_perpetual_put", "vg_american_put"):
        print(f"== {name}")
        status |= main(["crosscheck", "--config", str(ROOT / "configs" / f"{name}.toml"),
                        "--out", str(ROOT / "out" / f"crosscheck_{name}"), "--threads", "2"])
    sys.exit(status)
