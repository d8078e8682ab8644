"""Which of the three variational bounds is tightest on trained systems."""
import dataclasses

from _common import parser, save
from fcsim import experiments as ex
from fcsim import objective as ob
from fcsim.rng import stream


def main():
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--capacity", type=float, default=12.0)
    args = p.parse_args()
    ds = ex.datagen.gen_mixture_classification(seed=0)
    xs, v = ds.part("test")
    rows = []
    print(f"{'method':<12} {'seed':>4} {'IB':>10} {'AE':>10} {'SL':>10}  IB tightest")
    for method in ("autoencoder", "lagrange", "ib"):
        for s in range(args.seeds):
            cfg = ex.make_config(ex.AWGN | {"capacity_bits": args.capacity}, loss={"method": method}, training={"seed": s})
            f = ex.fit(cfg, ds)
            rep = ob.theorem1_report(f.system, xs, v, cfg.loss.lam, stream(s, "eval", "theorem1"))
            rows.append({"method": method, "seed": s, **dataclasses.asdict(rep), "ib_tightest": rep.ib_tightest})
            print(f"{method:<12} {s:>4} {rep.ib_bound:10.4f} {rep.au_bound:10.4f} {rep.sl_bound:10.4f}  {rep.ib_tightest}")
    save(rows, args.out)


if __name__ == "__main__":
    main()
