"""Oracle benchmark of a trained model on held-out phantoms at several slab thicknesses.

    python3 scripts/run_oracle.py --model artifacts/desk_model.slab --out artifacts/oracle
"""
import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from slabfill.config import RunConfig
from slabfill.evalmetrics import oracle_benchmark
from slabfill.phantoms import make_phantom
from slabfill.unet import load_model


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--model", default="artifacts/desk_model.slab")
    p.add_argument("--out", default="artifacts/oracle")
    p.add_argument("--thickness", type=int, nargs="+", default=[4, 8, 12])
    p.add_argument("--volumes", type=int, default=10)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--phantom-seed", type=int, default=1000)
    p.add_argument("--phantoms", type=int, default=3)
    args = p.parse_args()

    params = load_model(args.model)
    pool = [make_phantom(s) for s in range(args.phantom_seed, args.phantom_seed + args.phantoms)]
    gen = RunConfig.desk().generator
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        for t in args.thickness:
            report = oracle_benchmark(params, pool, gen, t, args.volumes, args.seed)
            report.write_json(out / f"oracle_{t}mm.json")
            print(f"thickness {t} mm, model better on {report.aggregates['model_better_count']}/{args.volumes}")
            print(report.to_table())
            print()


if __name__ == "__main__":
    main()
