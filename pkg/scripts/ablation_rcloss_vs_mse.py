"""Train the tiny model twice on one synthetic split, RCLoss vs MSE on the f_wei heads."""
import argparse

from iiao.experiments import format_table, rc_vs_mse


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=15)
    ap.add_argument("--test", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rows = rc_vs_mse(args.train, args.test, args.epochs, args.seed)
    print(format_table(rows))
    rc, mse = rows
    print("RCLoss <= MSE" if rc.test_mae <= mse.test_mae else "RCLoss did not beat MSE on this split")


if __name__ == "__main__":
    main()
