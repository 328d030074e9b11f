"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one full training step (forward + backward) at desk size with each
backend, since that is where the kernels actually matter.
"""

import argparse
import timeit

import numpy as np

from fusion_pilot.kernels import _pykernels

try:
    from fusion_pilot.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    x = np.ascontiguousarray(rng.standard_normal((32, 26, 50, 3)))
    dcols = np.ascontiguousarray(rng.standard_normal((32, 12, 24, 3, 3, 3)))
    img = rng.uniform(0, 100, (88, 200))
    missing = rng.random((88, 200)) < 0.05
    vals = np.where(missing, 0.0, img)
    return {
        "im2col 32x26x50x3 k3 s2": lambda k: k.im2col(x, 3, 3, 2, 12, 24),
        "col2im 32x12x24 k3 s2": lambda k: k.col2im(dcols, 26, 50, 2),
        "median 88x200 k3": lambda k: k.median_filter(img, 3),
        "median 88x200 k5": lambda k: k.median_filter(img, 5),
        "inpaint 88x200 5% holes": lambda k: k.inpaint_diffuse(vals, missing, 1e-3, 500),
    }


def train_step_time(repeat):
    from fusion_pilot import kernels
    from fusion_pilot.model import ModelConfig, build_model
    from fusion_pilot.training import Minibatch, TrainConfig, make_optimizer, train_step

    rng = np.random.default_rng(0)
    cfg = ModelConfig.for_profile("early", "desk")
    w, h = cfg.input_size
    batch = {"rgb": rng.uniform(0, 255, (32, h, w, 3)), "depth": rng.uniform(0, 255, (32, h, w, 1))}
    out = {}
    for name, impl in (("python", _pykernels), ("cython", _ckernels)):
        if impl is None:
            continue
        saved = kernels._impl
        kernels._impl = impl
        try:
            model = build_model(cfg, seed=0)
            tcfg = TrainConfig.for_profile("desk")
            opt = make_optimizer(model, tcfg)
            mb = Minibatch(batch, rng.uniform(0, 40, 32), rng.uniform(-1, 1, (32, 3)), rng.integers(0, 4, 32))
            out[name] = min(timeit.repeat(lambda: train_step(model, mb, opt, tcfg, 0), number=1, repeat=repeat))
        finally:
            kernels._impl = saved
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-train-step", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        tp = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:28s} {tp:10.3f} {'n/a':>10s}")
            continue
        tc = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {tp:10.3f} {tc:10.3f} {tp / tc:7.2f}x")
    if not args.no_train_step:
        t = train_step_time(max(3, args.repeat // 4))
        row = "  ".join(f"{k} {v * 1e3:.1f} ms" for k, v in t.items())
        print(f"desk train step, batch 32: {row}")


if __name__ == "__main__":
    main()
