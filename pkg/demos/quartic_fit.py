"""Learn the quartic oscillator from trajectories.

H = 1/2 p^T Minv p + sum(q^2/2 + q^4/4) with Minv = [[5, -1], [-1, 5]].
The default run is scaled down (300 trajectories, 100 epochs, larger step
size) and takes under a minute. Pass --full for 900 trajectories, 200
epochs and lr 1e-3.
"""

import argparse
import time

import numpy as np

from hamlearn.evaluation import metric_e1, metric_e2, sample_points
from hamlearn.models import HamiltonianModel, init_model
from hamlearn.systems import quartic_system
from hamlearn.training import TrainConfig, generate_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    N, epochs, lr = (900, 200, 1e-3) if args.full else (300, 100, 3e-3)

    s = quartic_system()
    ds = generate_dataset(s, N, 6, 0.3 / 5, seed=args.seed)
    params = init_model("separable", 2, (100, 50, 50), seed=args.seed + 1)

    t0 = time.perf_counter()

    def report(epoch, loss, _):
        if (epoch + 1) % 10 == 0:
            print(f"epoch {epoch + 1:3d}  loss {loss:.3e}  {time.perf_counter() - t0:.0f}s")

    cfg = TrainConfig(integrator="sv", epochs=epochs, batch_size=32, lr=lr, seed=args.seed + 2)
    res = train(ds, cfg, params, callback=report)

    print(f"E1 = {metric_e1(s, res.params, seed=args.seed + 3):.3e}")
    z = sample_points(s, 100, args.seed + 4)
    print(f"E2 = {metric_e2(s, res.params, z):.3e}")
    A = res.params.A
    print("learned A^T A =", np.array2string(A.T @ A, precision=3).replace("\n", ""))
    print("true Minv     =", np.array2string(s.Minv, precision=3).replace("\n", ""))
    model = HamiltonianModel(res.params)
    q = np.array([[0.5, -0.5]])
    print(f"H_theta(q, 0) - H_theta(0, 0) = {model.hamiltonian(q, 0 * q)[0] - model.hamiltonian(0 * q, 0 * q)[0]:.4f}"
          f"  (true {s.hamiltonian(q, 0 * q)[0]:.4f})")


if __name__ == "__main__":
    main()
