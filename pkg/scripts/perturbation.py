"""Tracking recovery from random 1 cm translation offsets around frame 0."""
import argparse
import dataclasses

from inrslam.experiments import PerturbationProtocol, perturbation_recovery


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    for f in dataclasses.fields(PerturbationProtocol):
        if isinstance(f.default, (int, float)) and not isinstance(f.default, bool):
            ap.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    ap.add_argument("--fixed-batch", action="store_true", help="draw tracking samples once per call")
    args = vars(ap.parse_args())
    p = PerturbationProtocol(resample=not args.pop("fixed_batch"), **args)
    res = perturbation_recovery(p)
    print("residuals cm:", " ".join(f"{r:.3f}" for r in res["residuals_cm"]))
    print(f"median {res['median_cm']:.3f} cm  max {res['max_cm']:.3f} cm  ratio {res['ratio']:.3f}  "
          f"{res['seconds']:.0f} s")


if __name__ == "__main__":
    main()
