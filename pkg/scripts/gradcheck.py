"""Finite-difference gradient sweep over every encoding x structure x rendering."""
import argparse

from inrslam.gradcheck import gradient_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--states", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = gradient_sweep(args.states, args.seed)
    for combo, err in res["per_combo"].items():
        print(f"{'/'.join(combo):36s} {err:.2e}")
    print("worst:", {k: f"{v:.2e}" for k, v in res["worst"].items()})


if __name__ == "__main__":
    main()
