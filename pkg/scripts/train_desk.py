"""Train the desk-scale model on procedural phantoms.

    python3 scripts/train_desk.py --out artifacts/desk_model.slab
"""
import argparse
import logging
from dataclasses import replace

from threadpoolctl import threadpool_limits

from slabfill.config import RunConfig
from slabfill.phantoms import make_phantom
from slabfill.trainer import train


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="artifacts/desk_model.slab")
    p.add_argument("--phantoms", type=int, default=3)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = RunConfig.desk()
    training = replace(cfg.training, seed=args.seed)
    if args.steps is not None:
        training = replace(training, max_steps=args.steps)
    pool = [make_phantom(s) for s in range(args.phantoms)]
    with threadpool_limits(limits=1):
        report = train(cfg.generator, cfg.network, training, pool, args.out)
    print(f"best val MAE {report.best_val_mae:.5f} at step {report.best_step}, "
          f"baseline {report.baseline_val_mae:.5f}, {report.wall_time_s / 3600:.2f} h")


if __name__ == "__main__":
    main()
