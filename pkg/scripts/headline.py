"""Pretrain + 5-fold CV for each pinned seed; prints per-seed accuracy and wall time.

    python3 scripts/headline.py [--config scripts/acceptance.cfg] [--seeds 0 1 2] [--out runs/headline]
"""
import argparse
from pathlib import Path

from detl.config import load_config
from detl.evaluation import summarize
from detl.experiment import headline_run

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(HERE / "acceptance.cfg"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/headline")
    args = ap.parse_args()
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        run = headline_run(cfg, seed)
        text, csv = summarize(run.cv)
        (out / f"seed{seed}_summary.txt").write_text(text)
        (out / f"seed{seed}_accuracy.csv").write_text(csv)
        (out / f"seed{seed}_pretrain.csv").write_text(run.pretrain.to_csv())
        print(f"seed {seed}: best val {max(run.pretrain.val_acc):.4f}, cv mean {run.cv.mean:.4f} "
              f"std {run.cv.std:.4f}, {run.seconds:.0f}s", flush=True)


if __name__ == "__main__":
    main()
