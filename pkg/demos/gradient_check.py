"""Compare backpropagated gradients with central differences, per tensor,
then show that a doubled gradient is caught.

    python demos/gradient_check.py [--seed 0]
"""

import argparse

from flowcast.cli import RunConfig, gradcheck_network
from flowcast.train import grad_check_tensors


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    net, window, target = gradcheck_network(RunConfig(seed=args.seed))
    for name, err in grad_check_tensors(net, window, target).items():
        print(f"{name:16s} {err:.2e}")

    corrupted = grad_check_tensors(net, window, target, corrupt="indrnn.0.u")
    print(f"with indrnn.0.u doubled: {corrupted['indrnn.0.u']:.3f}")


if __name__ == "__main__":
    main()
