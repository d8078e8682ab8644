"""Channel-use accounting for uplink and downlink traffic."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

PHASES = ("stage1", "stage2", "stage3", "e2e", "inference")
DIRECTIONS = ("uplink", "downlink")
LEDGER_METHODS = ("e2e", "ib3s_awgn", "ib3s_gmac")


class LedgerError(ValueError):
    pass


@dataclass
class CommLedger:
    """Non-decreasing counters keyed by (phase, node, direction).

    ``node`` is an integer node id or ``"all"`` for broadcast traffic.
    """

    counts: dict = field(default_factory=lambda: defaultdict(float))

    def add(self, phase: str, node, direction: str, uses: float):
        if phase not in PHASES:
            raise LedgerError(f"unknown phase {phase!r}")
        if direction not in DIRECTIONS:
            raise LedgerError(f"unknown direction {direction!r}")
        if uses < 0:
            raise LedgerError("channel-use counts cannot decrease")
        self.counts[(phase, str(node), direction)] += uses

    def total(self, direction: str | None = None, phase: str | None = None, node=None) -> float:
        return sum(
            v for (p, n, d), v in self.counts.items()
            if (direction is None or d == direction)
            and (phase is None or p == phase)
            and (node is None or n == str(node))
        )

    def snapshot(self) -> dict:
        out = {}
        for phase in PHASES:
            for d in DIRECTIONS:
                t = self.total(d, phase)
                if t:
                    out[f"{phase}_{d}"] = t
        out["uplink"] = self.total("uplink")
        out["downlink"] = self.total("downlink")
        return out

    def rows(self) -> list[tuple[str, str, str, float]]:
        return sorted((p, n, d, v) for (p, n, d), v in self.counts.items())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "node", "direction", "channel_uses"])
        for p, n, d, v in self.rows():
            w.writerow([p, n, d, _fmt(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CommLedger":
        led = cls()
        for row in csv.DictReader(io.StringIO(text)):
            led.add(row["phase"], row["node"], row["direction"], float(row["channel_uses"]))
        return led


def _fmt(v: float):
    return int(v) if float(v).is_integer() else repr(float(v))


def ledger_formulas(method: str, K: int, B: int, T: int, V_size: int = 0) -> dict:
    """Closed-form channel-use totals for T rounds (or epochs) over B examples."""
    for name, val in (("K", K), ("B", B), ("T", T), ("V_size", V_size)):
        if int(val) != val or val < 0:
            raise LedgerError(f"{name} must be a non-negative integer")
    uplink = K * B * T
    if method == "e2e":
        num = K * B * T
        downlink = num // 64 if num % 64 == 0 else num / 64
    elif method == "ib3s_awgn":
        downlink = B * T * V_size
    elif method == "ib3s_gmac":
        downlink = B * T * (V_size + K)
    else:
        raise LedgerError(f"unknown method {method!r}")
    return {"uplink": uplink, "downlink": downlink}
