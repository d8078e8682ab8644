"""Test accuracy of the three training losses over a capacity grid (orthogonal AWGN, N = 4)."""
import numpy as np

from _common import parser, save
from fcsim import experiments as ex

METHODS = ("autoencoder", "lagrange", "ib")


def main():
    p = parser(__doc__)
    p.add_argument("--capacity", type=float, action="append", help="total capacity in bits (repeatable)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--k-n", type=int, default=ex.AWGN["k_n"])
    args = p.parse_args()
    grid = args.capacity or list(ex.CAPACITY_GRID)
    ds = ex.datagen.gen_mixture_classification(seed=0)
    rows = []
    print(f"{'C':>5} " + " ".join(f"{m:>12}" for m in METHODS))
    for c in grid:
        chan = ex.AWGN | {"k_n": args.k_n, "capacity_bits": c}
        med = {}
        for m in METHODS:
            accs = [ex.fit(ex.make_config(chan, loss={"method": m}, training={"epochs": args.epochs, "seed": s}), ds).test.accuracy
                    for s in range(args.seeds)]
            med[m] = float(np.median(accs))
            rows.append({"capacity_bits": c, "method": m, "accuracy": accs})
        print(f"{c:5g} " + " ".join(f"{med[m]:12.2f}" for m in METHODS))
    save(rows, args.out)


if __name__ == "__main__":
    main()
