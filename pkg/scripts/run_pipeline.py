#!/usr/bin/env python3
"""Run the default phantom pipeline through the CLI.

Training volume seed 0, held-out test volume seed 1:
phantom -> fit-sh -> train -> predict, csd -> eval (WM + crossing region).

    python3 scripts/run_pipeline.py OUTDIR [--rescnn] [--epochs N]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from fodfnet import cli


def step(*argv) -> None:
    argv = [str(a) for a in argv]
    t0 = time.perf_counter()
    code = cli.main(argv)
    print(f"  {argv[0]:8s} {time.perf_counter() - t0:7.1f} s", flush=True)
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("--rescnn", action="store_true", help="also train and evaluate the patch network")
    ap.add_argument("--epochs", type=int, help="override the training epochs")
    ap.add_argument("--rescnn-epochs", type=int, default=40)
    ap.add_argument("--rescnn-lr", type=float, default=1e-3)
    args = ap.parse_args()
    o = args.out

    for name, seed in (("train", 0), ("test", 1)):
        step("phantom", "--out", o / f"phantom_{name}", "--seed", seed)
        p = o / f"phantom_{name}"
        step("fit-sh", "--out", o / f"sh_{name}", "--dwi", p / "dwi.nii", "--bval", p / "dwi.bval", "--bvec", p / "dwi.bvec")

    tr, te = o / "phantom_train", o / "phantom_test"
    nets = [("resdnn", [] if args.epochs is None else ["--epochs", args.epochs])]
    if args.rescnn:
        nets.append(("rescnn", ["--epochs", args.rescnn_epochs, "--lr", args.rescnn_lr]))
    preds = []
    for arch, extra in nets:
        step("train", "--out", o / f"model_{arch}", "--arch", arch, "--inputs", o / "sh_train" / "sh.nii",
             "--fodf", tr / "fodf.nii", "--fractions", tr / "fractions.nii", "--mask", tr / "mask.nii", *extra)
        step("predict", "--out", o / f"pred_{arch}", "--model", o / f"model_{arch}" / "model.json",
             "--inputs", o / "sh_test" / "sh.nii", "--mask", te / "mask.nii")
        preds += ["--pred", f"{arch}={o / f'pred_{arch}' / 'fodf.nii'},{o / f'pred_{arch}' / 'fractions.nii'}"]

    step("csd", "--out", o / "csd", "--dwi", te / "dwi.nii", "--bval", te / "dwi.bval", "--bvec", te / "dwi.bvec",
         "--mask", te / "mask.nii")
    preds += ["--pred", f"scsd={o / 'csd' / 'fodf.nii'}"]
    step("eval", "--out", o / "eval", "--truth-fodf", te / "fodf.nii", "--truth-fractions", te / "fractions.nii",
         "--mask", te / "mask.nii", "--labels", te / "labels.nii", "--region", "wm", *preds)

    summary = json.loads((o / "eval" / "summary.json").read_text())
    for name, s in summary["methods"].items():
        fr = "".join(f"  rmse_{t} {s[f'rmse_{t}']:.4f}" for t in ("csf", "gm", "wm") if f"rmse_{t}" in s)
        print(f"{name:8s} ACC median {s['acc_median']:.4f} mean {s['acc_mean']:.4f}{fr}")


if __name__ == "__main__":
    main()
