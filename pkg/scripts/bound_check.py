"""Randomized check of the two-task posterior variance lower bound with fixed hyperparameters."""
import argparse

from mtbo.analysis import proposition_battery


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--instances", type=int, default=500)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    results = proposition_battery(args.instances, args.dim, args.seed)
    violations = sum(not h for _, _, h in results)
    print(f"violations: {violations} / {len(results)}")
    print(f"smallest lhs - rhs: {min(l - r for l, r, _ in results):.3e}")
    raise SystemExit(1 if violations else 0)


if __name__ == "__main__":
    main()
