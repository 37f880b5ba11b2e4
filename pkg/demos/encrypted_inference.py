"""Train a small polynomial network, then classify an encrypted batch with it.

    python demos/encrypted_inference.py --batch 128 --preset desk
"""
import argparse
import time

import numpy as np

from beaa.data import synthetic_dataset
from beaa.he import make_backend, preset
from beaa.inference import compile_plan, encrypted_inference, stage_summary
from beaa.model import build_sequential, fold_batchnorm
from beaa.training import TrainConfig, train_student, train_teacher

BLOCKS = [("conv", 4, 3, 1), ("act",), ("bn",), ("pool", 2), ("conv", 3, 1, 0), ("act",),
          ("bn",), ("gap",)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--backend", default="ckks", choices=["ckks", "sim"])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = synthetic_dataset(768, 64, max(args.batch, 64), 3, (2, 6, 6), noise=1.5, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=32, seed=args.seed)
    teacher, _ = train_teacher(build_sequential((2, 6, 6), 3, BLOCKS, "relu", seed=args.seed),
                               ds, cfg)
    student, rows = train_student(build_sequential((2, 6, 6), 3, BLOCKS, "element",
                                                   seed=args.seed), ds, cfg, teacher)
    print(f"student: train acc {rows[-1]['train_acc']:.3f}, val acc {rows[-1]['val_acc']:.3f}")

    net = fold_batchnorm(student)
    params = preset(args.preset)
    plan = compile_plan(net, params)
    print(f"plan depth {plan.depth} of {params.max_level} levels; op counts {plan.counts}")
    for st in stage_summary(plan):
        print(f"  {st['stage']:>10} {st['kind']:<10} {st['in_shape']} -> {st['out_shape']} "
              f"level {st['in_level']} -> {st['out_level']}")

    be = make_backend(args.backend, params)
    keys = be.keygen(seed=args.seed)
    x, y = ds.x_test[:args.batch], ds.y_test[:args.batch]
    t0 = time.perf_counter()
    he_logits = encrypted_inference(net, x, be, keys, seed=args.seed, plan=plan)
    dt = time.perf_counter() - t0
    plain = net.forward(x)[0]
    agree = np.mean(np.argmax(he_logits, 1) == np.argmax(plain, 1))
    print(f"{len(x)} images in {dt:.1f}s ({dt / len(x) * 1e3:.1f} ms/image amortized)")
    print(f"max |HE - plain| logit error {np.max(np.abs(he_logits - plain)):.2e}; "
          f"argmax agreement {agree:.3f}; HE accuracy {np.mean(np.argmax(he_logits, 1) == y):.3f}")


if __name__ == "__main__":
    main()
