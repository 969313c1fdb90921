"""Compare how far each integrator drifts off T*S^2 on the single pendulum.

    python demos/constraint_drift.py [--steps 10000] [--h 0.1]
"""

import argparse

import numpy as np

from hamlearn.geometry import manifold_violation
from hamlearn.integrators import rollout
from hamlearn.systems import pendulum_k1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--h", type=float, default=0.1)
    args = ap.parse_args()

    s = pendulum_k1()
    x0 = s.sample(np.random.default_rng(0), 10)
    H0 = s.hamiltonian(*x0)
    print(f"{args.steps} steps of size {args.h} from 10 random states")
    print(f"{'integrator':>10}  {'max violation':>14}  {'max |H - H0|':>13}")
    for name in ("ee", "rk4", "le", "cf4"):
        # the ambient Euler field blows up within a few dozen steps off the sphere
        n = min(args.steps, 10) if name == "ee" else args.steps
        tr = rollout(name, s, x0, args.h, n + 1)
        dH = np.max(np.abs(s.hamiltonian(tr.q[-1], tr.p[-1]) - H0))
        note = f"  ({n} steps)" if n != args.steps else ""
        print(f"{name:>10}  {manifold_violation(tr.q, tr.p):14.3e}  {dH:13.3e}{note}")

if __name__ == "__main__":
    main()
