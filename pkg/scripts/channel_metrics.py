"""Key reconstruction MSE per channel-selection metric on the outlier-channel suite."""

import argparse

import numpy as np

from vidkv.analysis import SUITES
from vidkv.config import METRICS, QuantConfig
from vidkv.key_quant import dequantize_key_array, quantize_key_block
from vidkv.tensor_io import gen_synthetic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--k", type=float, default=0.5)
    args = ap.parse_args()
    spec = SUITES["outlier_channels"]
    for fft_mode in ("off", "auto"):
        mse = np.zeros((args.seeds, len(METRICS)))
        for seed in range(args.seeds):
            K = gen_synthetic(spec.with_seed(seed))
            x = K.data.astype(np.float64)
            for j, metric in enumerate(METRICS):
                cfg = QuantConfig(key_k=args.k, key_metric=metric, fft_mode=fft_mode)
                mse[seed, j] = np.mean((dequantize_key_array(quantize_key_block(K, cfg)) - x) ** 2)
        best = mse.min(axis=1, keepdims=True)
        print(f"fft_mode={fft_mode}")
        for j, metric in enumerate(METRICS):
            print(f"  {metric:<14} mean mse {mse[:, j].mean():.4f}  lowest in {np.mean(mse[:, j] <= best[:, 0]):.2f}")


if __name__ == "__main__":
    main()
