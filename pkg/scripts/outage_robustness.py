"""Accuracy under sensor outage and under train/test capacity mismatch."""
from _common import parser, save
from fcsim import experiments as ex


def main():
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    out = ex.outage(seeds=args.seeds)
    print("silent sensors  " + " ".join(f"{k:>7}" for k in out["silent"]))
    for name, curve in out["median"].items():
        print(f"{name:<15} " + " ".join(f"{a:7.2f}" for a in curve))
    rob = {kind: ex.robustness(kind) for kind in ("orth_awgn", "gmac")}
    for kind, r in rob.items():
        print(f"\n{kind}: accuracy, rows C_tr, columns C_te")
        grid = r["grid"]
        print("      " + " ".join(f"{c:>7g}" for c in grid))
        for a in grid:
            print(f"{a:5g} " + " ".join(f"{r['accuracy'][f'{a:g}->{b:g}']:7.2f}" for b in grid))
    save({"outage": out, "robustness": rob}, args.out)


if __name__ == "__main__":
    main()
