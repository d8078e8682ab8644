"""Distributed stage 3 against end-to-end fine-tuning on both channels, with channel-use totals."""
from _common import parser, save
from fcsim import experiments as ex


def main():
    p = parser(__doc__)
    p.add_argument("--capacity", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = {}
    for kind in ("orth_awgn", "gmac"):
        r = ex.three_stage_parity(kind, args.capacity, args.seed)
        out[kind] = r
        print(f"{kind}: T = {r['rounds']} rounds (bound {r['remark1']['t_bound']}), "
              f"accuracy {r['accuracy_distributed']:.2f} distributed / {r['accuracy_e2e']:.2f} fine-tuned")
        print(f"  stage-3 uplink {r['uplink_distributed']:.0f} vs {r['uplink_e2e']:.0f}, "
              f"downlink {r['ledger_distributed']['stage3_downlink']:.0f} vs {r['ledger_e2e']['stage3_downlink']:.1f}")
    save(out, args.out)


if __name__ == "__main__":
    main()
