"""Optimize a 21x21 aperture code with the MTF objective and save it as the reference mask."""
import argparse
import json
from pathlib import Path

from cadsim.evaluate import mask_check
from cadsim.mask import reference_mask_path, save_mask
from cadsim.optimize import OptimizeConfig, optimize_mask


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--alpha0", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=reference_mask_path())
    ap.add_argument("--trace", type=Path, default=Path("runs/reference_mask/trace.jsonl"))
    args = ap.parse_args()

    cfg = OptimizeConfig(iterations=args.iterations, lr_mask=args.lr, alpha0=args.alpha0, seed=args.seed)
    trace = optimize_mask(cfg)
    trace.write_jsonl(args.trace)
    save_mask(trace.final_binary, args.out)
    report = mask_check(trace.final_binary)
    print(json.dumps({"first": trace.records[0], "last": trace.records[-1], "repaired": trace.repaired_cells,
                      **report}, indent=1))


if __name__ == "__main__":
    main()
