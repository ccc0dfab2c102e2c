"""Per-channel vs per-token value quantization on each synthetic suite."""

import argparse

from vidkv.analysis import SUITES, compare_axes


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    args = ap.parse_args()
    print(f"{'suite':<18}{'bits':>8}{'per_channel':>13}{'per_token':>11}{'pc win rate':>13}")
    for name, spec in SUITES.items():
        for bits in ("2", "ternary"):
            r = compare_axes(spec, bits, range(args.seeds))
            print(f"{name:<18}{bits:>8}{r['mean_per_channel_mse']:>13.4f}{r['mean_per_token_mse']:>11.4f}"
                  f"{r['per_channel_win_rate']:>13.2f}")


if __name__ == "__main__":
    main()
