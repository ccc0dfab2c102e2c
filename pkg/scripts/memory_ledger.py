"""Byte ledger for the long-video deployment shape across the main configurations."""

import argparse

from vidkv.analysis import LONG_VIDEO_SHAPE, memory_report
from vidkv.config import QuantConfig

CONFIGS = {
    "fp16": None,
    "K2-V2": QuantConfig(key_k=1.0, value_mode="uniform2"),
    "K1.5-V1.58": QuantConfig(key_k=0.5),
    "K1.25-V1.58": QuantConfig(key_k=0.25),
    "K1.5-V1.58-stp0.2": QuantConfig(key_k=0.5, value_mode="ternary_stp", p=0.2),
}


def main() -> None:
    argparse.ArgumentParser(description=__doc__).parse_args()
    fp16 = memory_report(None, LONG_VIDEO_SHAPE).total_bytes
    print(f"{'config':<20}{'key bits':>10}{'value bits':>12}{'meta bits':>11}{'total GB':>11}{'vs fp16':>9}")
    for name, cfg in CONFIGS.items():
        rep = memory_report(cfg, LONG_VIDEO_SHAPE)
        print(f"{name:<20}{rep.key_code_bits_per_element:>10.3f}{rep.value_code_bits_per_element:>12.3f}"
              f"{rep.metadata_bits_per_element:>11.3f}{rep.total_bytes / 1e9:>11.2f}{rep.total_bytes / fp16:>9.3f}")


if __name__ == "__main__":
    main()
