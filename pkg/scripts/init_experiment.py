"""Init-only architecture comparison on frame 0 of the lab sequence (median of seeds)."""
import argparse
import json

from inrslam.experiments import init_only_medians


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--encodings", nargs="+", default=["dense", "mlp"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--iters", type=int, default=200)
    args = ap.parse_args()
    res = init_only_medians(tuple(args.encodings), tuple(args.seeds), args.iters)
    for enc, r in res.items():
        print(f"{enc:16s} DepthL1 {r['depth_l1_cm']:7.2f} cm   PSNR {r['psnr_db']:6.2f} dB")
    print(json.dumps({k: {m: v[m] for m in ("depth_l1_cm", "psnr_db")} for k, v in res.items()}))


if __name__ == "__main__":
    main()
