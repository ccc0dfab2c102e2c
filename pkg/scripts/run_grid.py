"""Run a JSON sweep grid (default: grids/fidelity.json) and print the summary."""

import argparse
import json
from pathlib import Path

from vidkv.analysis import run_sweep

HERE = Path(__file__).parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("grid", nargs="?", type=Path, default=HERE / "grids" / "fidelity.json")
    ap.add_argument("--out", type=Path, default=Path("results") / "fidelity")
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = run_sweep(args.grid, args.out)
    summary = json.loads(json_path.read_text())["configs"]
    for label, s in sorted(summary.items(), key=lambda kv: kv[1]["mean_attention_divergence"]):
        print(f"{label:<52} key_bits={s['key_code_bits']:.2f} value_bits={s['value_code_bits']:.2f} "
              f"div={s['mean_attention_divergence']:.4f}")
    print(f"wrote {csv_path} and {json_path}")


if __name__ == "__main__":
    main()
