"""Sweep descriptor noise and report mean pairwise AP over seeds.

Used to pick the default noise level so that pairwise AP sits in [0.3, 0.7].

    python3 scripts/calibrate_noise.py --noise 1.4 1.6 1.7 1.8 2.0 --seeds 20
"""

import argparse

import numpy as np

from vprgraph.evaluation import Mode, ScenarioParams, generate_scenario, run_experiment
from vprgraph.simcore import ProblemSpec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--noise", type=float, nargs="+", default=[1.4, 1.6, 1.7, 1.8, 2.0])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--places", type=int, default=ScenarioParams.places)
    p.add_argument("--all-modes", action="store_true", help="also run the graph modes")
    args = p.parse_args()

    spec = ProblemSpec()
    modes = list(Mode) if args.all_modes else [Mode.PAIRWISE]
    print("noise  " + "  ".join(f"{m.value:>12}" for m in modes) + "   min pairwise  max pairwise")
    for noise in args.noise:
        params = ScenarioParams(places=args.places, noise=noise)
        aps = np.array([[run_experiment(generate_scenario(params, s), spec, m).ap for m in modes]
                        for s in range(args.seeds)])
        means = "  ".join(f"{v:12.3f}" for v in aps.mean(axis=0))
        print(f"{noise:5.2f}  {means}   {aps[:, 0].min():12.3f}  {aps[:, 0].max():12.3f}")


if __name__ == "__main__":
    main()
