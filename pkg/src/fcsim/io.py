"""File formats: checkpoints, metrics streams, datasets and convergence traces.

Checkpoint layout::

    b"FCSIM1"                magic, 6 bytes
    uint32 (little endian)   length of the JSON header in bytes
    JSON header              UTF-8; describes every array (see ``save_checkpoint``)
    float64 (little endian)  all arrays concatenated in header order

Dataset layout: the first line is a JSON object with the generator arguments
and the column names; the remaining lines are CSV rows
``id, split, v..., x0_0, x0_1, ..., x1_0, ...`` with one ``v`` column for
class labels and ``m`` columns ``v0..v{m-1}`` for regression targets.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from fcsim import __version__
from fcsim import channel as ch
from fcsim import datagen
from fcsim import system as sy
from fcsim.nn import Layer, Mlp

MAGIC = b"FCSIM1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _finite(obj):
    """Replace NaN and infinities by None so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    plain = json.loads(json.dumps(obj, default=_json_default))
    return json.dumps(_finite(plain), sort_keys=True, allow_nan=False)


# -- checkpoints ---------------------------------------------------------------------

def _net_meta(net: Mlp) -> dict:
    return {"widths": net.widths, "activations": net.activations}


def _net_from(meta: dict, flat: np.ndarray, pos: int) -> tuple[Mlp, int]:
    widths, acts = meta["widths"], meta["activations"]
    if len(acts) != len(widths) - 1:
        raise FormatError("activation list does not match widths")
    layers = []
    for a, b, act in zip(widths[:-1], widths[1:], acts):
        w = flat[pos:pos + a * b].reshape(b, a).copy()
        pos += a * b
        bias = flat[pos:pos + b].copy()
        pos += b
        layers.append(Layer(w, bias, act))
    return Mlp(layers), pos


def save_checkpoint(path: str | Path, system: sy.System, extra: dict | None = None) -> None:
    """Write ``system`` (and JSON-serialisable ``extra`` metadata) to ``path``."""
    arrays = []
    encs = []
    for enc in system.encoders:
        meta = _net_meta(enc.net)
        arrays += enc.net.params()
        if enc.embed is not None:
            meta["embed_shape"] = list(enc.embed.shape)
            meta["embed_trainable"] = enc.embed_trainable
            arrays.append(enc.embed)
        encs.append(meta)
    arrays += system.decoder.params()
    for h in system.helpers:
        arrays += h.params()
    spec = system.channel
    header = {
        "format": FORMAT_VERSION,
        "versions": {"fcsim": __version__, "numpy": np.__version__},
        "channel": {"kind": spec.kind, "k_per_node": list(spec.k_per_node), "p_t": spec.p_t, "sigma_z2": spec.sigma_z2},
        "task": system.task,
        "normalize": system.normalize,
        "encoders": encs,
        "decoder": {**_net_meta(system.decoder.net), "kind": system.decoder.kind},
        "helpers": [_net_meta(h) for h in system.helpers],
        "n_values": int(sum(a.size for a in arrays)),
        "extra": extra or {},
    }
    blob = dumps_json(header).encode()
    data = np.concatenate([np.ravel(a) for a in arrays]).astype("<f8") if arrays else np.zeros(0, "<f8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(data.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC:
        raise FormatError(f"{path} is not an fcsim checkpoint")
    (n,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10:10 + n].decode())
    if header.get("format") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format {header.get('format')}")
    flat = np.frombuffer(raw[10 + n:], dtype="<f8").astype(np.float64)
    if flat.size != header["n_values"]:
        raise FormatError(f"expected {header['n_values']} values, found {flat.size}")
    return header, flat


def load_checkpoint(path: str | Path) -> tuple[sy.System, dict]:
    header, flat = read_checkpoint(path)
    c = header["channel"]
    spec = ch.ChannelSpec(c["kind"], tuple(c["k_per_node"]), c["p_t"], c["sigma_z2"])
    pos = 0
    encs = []
    for meta in header["encoders"]:
        net, pos = _net_from(meta, flat, pos)
        embed, trainable = None, False
        if "embed_shape" in meta:
            k, r = meta["embed_shape"]
            embed = flat[pos:pos + k * r].reshape(k, r).copy()
            pos += k * r
            trainable = bool(meta["embed_trainable"])
        encs.append(sy.Encoder(net, embed, trainable))
    dec_net, pos = _net_from(header["decoder"], flat, pos)
    helpers = []
    for meta in header["helpers"]:
        h, pos = _net_from(meta, flat, pos)
        helpers.append(h)
    if pos != flat.size:
        raise FormatError("checkpoint holds trailing values")
    system = sy.System(spec, encs, sy.Decoder(dec_net, header["decoder"]["kind"]), header["task"],
                       header["normalize"], helpers)
    return system, header["extra"]


# -- metrics -----------------------------------------------------------------------

class MetricsWriter:
    """Line-delimited JSON sink; each record gets a running ``step`` counter."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._f: TextIO = open(self.path, "w")
        self.step = 0

    def __call__(self, record: dict):
        self._f.write(dumps_json({"step": self.step, **record}) + "\n")
        self._f.flush()
        self.step += 1

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# -- datasets ---------------------------------------------------------------------

def _columns(ds: datagen.DistributedDataset) -> list[str]:
    if ds.task == "classification":
        targets = ["v"]
    else:
        targets = [f"v{j}" for j in range(ds.out_dim)]
    views = [f"x{n}_{j}" for n, x in enumerate(ds.views) for j in range(x.shape[1])]
    return ["id", "split", *targets, *views]


def write_dataset(ds: datagen.DistributedDataset, dest: str | Path | TextIO) -> None:
    cols = _columns(ds)
    header = {"task": ds.task, "params": ds.params, "view_dims": [x.shape[1] for x in ds.views], "columns": cols}
    own = not hasattr(dest, "write")
    f = open(dest, "w", newline="") if own else dest
    try:
        f.write(dumps_json(header) + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        targets = ds.targets.reshape(ds.size, -1)
        x = np.concatenate(ds.views, axis=1)
        for i in range(ds.size):
            t = [int(targets[i, 0])] if ds.task == "classification" else [repr(float(a)) for a in targets[i]]
            w.writerow([i, ds.split[i], *t, *(repr(float(a)) for a in x[i])])
    finally:
        if own:
            f.close()


def read_dataset(src: str | Path | TextIO) -> datagen.DistributedDataset:
    own = not hasattr(src, "read")
    f = open(src, newline="") if own else src
    try:
        header = json.loads(f.readline())
        rows = list(csv.reader(f))
    finally:
        if own:
            f.close()
    if not rows or rows[0] != header["columns"]:
        raise FormatError("column row does not match the header")
    body = rows[1:]
    task = header["task"]
    n_targets = 1 if task == "classification" else sum(c.startswith("v") for c in header["columns"])
    ids = np.array([int(r[0]) for r in body])
    if not np.array_equal(ids, np.arange(len(body))):
        raise FormatError("example ids must run 0..B-1 in order")
    split = np.array([r[1] for r in body], dtype="<U5")
    vals = np.array([[float(a) for a in r[2:]] for r in body]) if body else np.zeros((0, 0))
    targets = vals[:, :n_targets]
    targets = targets[:, 0].astype(np.int64) if task == "classification" else targets
    x = vals[:, n_targets:]
    views, i = [], 0
    for d in header["view_dims"]:
        views.append(x[:, i:i + d].copy())
        i += d
    params = header["params"]
    windows = None
    if params.get("generator") == "mixture":
        windows = datagen.view_windows(params["N"], params["latent_dim"], params["view_dim"], params["overlap_frac"])
    return datagen.DistributedDataset(views, targets, split, task, params, None, windows)


# -- convergence traces -----------------------------------------------------------

TRACE_COLUMNS = ("s", "m_s", "loss", "grad_norm_sq", "delta_norm_sq", "zeta", "xi", "lemma_slack")


def write_trace_csv(rows: Iterable[dict], dest: str | Path | TextIO) -> None:
    own = not hasattr(dest, "write")
    f = open(dest, "w", newline="") if own else dest
    try:
        w = csv.DictWriter(f, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if own:
            f.close()


def read_trace_csv(src: str | Path) -> list[dict]:
    with open(src, newline="") as f:
        out = []
        for r in csv.DictReader(f):
            out.append({k: (int(v) if k in ("s", "m_s") else float(v)) for k, v in r.items()})
        return out


def isclose_rows(a: dict, b: dict) -> bool:
    """Row equality where NaN matches NaN."""
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, float) and math.isnan(x):
            if not (isinstance(y, float) and math.isnan(y)):
                return False
        elif x != y:
            return False
    return True


def ledger_to_file(ledger, path: str | Path) -> None:
    Path(path).write_text(ledger.to_csv())
