#!/usr/bin/env python3
"""Engine-file size sweep: build fp32/fp16/int8 engines for each preset with
random weights and print the size table with fp16/fp32 and int8/fp32 ratios.
"""

import sys

from swinq import engine, model


def main():
    print(f"{'preset':>8} {'params':>12} {'fp32 MB':>9} {'fp16 MB':>9} "
          f"{'int8 MB':>9} {'fp16/fp32':>10} {'int8/fp32':>10}")
    for name, cfg in model.PRESETS.items():
        params = model.init_params(cfg, 0)
        sizes = {}
        for mode in (engine.PrecisionMode.fp32(), engine.PrecisionMode.fp16(),
                     engine.PrecisionMode.int8("default_range")):
            sizes[mode.tag] = len(engine.serialize_engine(
                engine.build_engine(params, cfg, mode, [])))
        mb = {k: v / (1 << 20) for k, v in sizes.items()}
        print(f"{name:>8} {model.param_count(cfg):>12,} "
              f"{mb['fp32']:>9.2f} {mb['fp16']:>9.2f} {mb['int8']:>9.2f} "
              f"{sizes['fp16'] / sizes['fp32']:>10.3f} {sizes['int8'] / sizes['fp32']:>10.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
