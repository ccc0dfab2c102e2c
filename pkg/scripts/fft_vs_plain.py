"""1-bit key coding: spectral sign coding vs plain min/max, across frame lengths.

Rows with frame_len below the group size show where the spectral path loses.
"""

import argparse

import numpy as np

from vidkv.key_quant import fft_dequantize_array, fft_quantize_array
from vidkv.quant_core import GroupGeometry, uniform_dequantize_array, uniform_quantize_array
from vidkv.tensor_io import SynthSpec, gen_synthetic


def mse_pair(X: np.ndarray, G: int) -> tuple[float, float]:
    x = X.astype(np.float64)
    fft = np.mean((fft_dequantize_array(fft_quantize_array(X, G)) - x) ** 2)
    plain = np.mean((uniform_dequantize_array(uniform_quantize_array(X, 1, GroupGeometry("per_channel", G))) - x)
                    ** 2)
    return float(fft), float(plain)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--G", type=int, default=32)
    args = ap.parse_args()
    print(f"{'workload':<32}{'fft mse':>10}{'plain mse':>11}{'win rate':>10}")
    cases = [(f"periodic frame_len={fl}", SynthSpec("periodic_frames", 256, 32, frame_len=fl)) for fl in
             (4, 8, 16, 32, 64, 128)]
    cases.append(("gaussian (no structure)", SynthSpec("gaussian_outlier_channels", 256, 32)))
    for label, spec in cases:
        pairs = np.array([mse_pair(gen_synthetic(spec.with_seed(s)).data, args.G) for s in range(args.seeds)])
        wins = np.mean(pairs[:, 0] <= 0.8 * pairs[:, 1])
        print(f"{label:<32}{pairs[:, 0].mean():>10.4f}{pairs[:, 1].mean():>11.4f}{wins:>10.2f}")

if __name__ == "__main__":
    main()
