"""Octree prior vs prior + learned residual on the sphere scene."""
import argparse

from inrslam.experiments import explicit_hybrid_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=150)
    ap.add_argument("--views", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = explicit_hybrid_experiment(args.iters, args.views, args.seed)
    print(f"prior gap {r['prior_gap']:.1e}")
    print(f"projective SDF error  prior {r['prior_err_cm']:.3f} cm  hybrid {r['hybrid_err_cm']:.3f} cm")
    print(f"euclidean SDF error   prior {r['prior_euclid_cm']:.3f} cm  hybrid {r['hybrid_euclid_cm']:.3f} cm")


if __name__ == "__main__":
    main()
