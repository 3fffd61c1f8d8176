"""30-frame lab sequence with dense + direct; prints the aligned ATE."""
import argparse

from inrslam.experiments import mini_slam


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = mini_slam(args.seed)
    print(f"ATE {res['ate_cm']:.2f} cm (1% of diameter = {0.01 * res['diameter_cm']:.2f} cm), "
          f"flagged frames {res['flagged']}, {res['seconds']:.0f} s")


if __name__ == "__main__":
    main()
