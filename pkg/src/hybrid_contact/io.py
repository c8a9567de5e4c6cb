"""JSON Lines datasets and CSV tables.

Every dataset line is one JSON object with a ``t`` timestamp and a ``type``
in {imu, encoder, contact, relpose, truth}.  Floats are written with 17
significant digits so a write/read round trip is value-identical.
"""

import json
import math

import numpy as np

from . import manifold as mf
from .exceptions import OutOfOrderTimestamp, ParseError

RECORD_FIELDS = {
    "imu": ("w", "a"),
    "encoder": ("alpha",),
    "contact": ("contacts",),
    "relpose": ("i", "j", "q", "p"),
    "truth": ("X_q", "X_p", "v", "C_q", "C_p", "bg", "ba"),
}
VECTOR_SIZES = {"w": 3, "a": 3, "q": 4, "p": 3, "X_q": 4, "X_p": 3, "v": 3, "C_q": 4,
                "C_p": 3, "bg": 3, "ba": 3}
QUAT_TOL = 1e-9


def _fmt(x):
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError("non-finite float in record")
        s = format(x, ".17g")
        if not any(c in s for c in ".en"):
            s += ".0"
        return s
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialise {type(x).__name__}")


def format_record(rec):
    """One JSON line for a record dict; ``t`` and ``type`` come first."""
    ordered = {"t": float(rec["t"]), "type": rec["type"]}
    ordered.update((k, v) for k, v in rec.items() if k not in ("t", "type"))
    return _fmt(ordered)


def write_dataset(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        last = -math.inf
        for rec in records:
            if rec["t"] < last:
                raise OutOfOrderTimestamp(f"record at t={rec['t']} after t={last}")
            last = rec["t"]
            f.write(format_record(rec))
            f.write("\n")


def _validate(rec, lineno):
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", lineno)
    if "t" not in rec or "type" not in rec:
        raise ParseError("record needs 't' and 'type'", lineno)
    kind = rec["type"]
    if kind not in RECORD_FIELDS:
        raise ParseError(f"unknown record type {kind!r}", lineno)
    if not isinstance(rec["t"], (int, float)) or isinstance(rec["t"], bool):
        raise ParseError("'t' must be a number", lineno)
    for name in RECORD_FIELDS[kind]:
        if name not in rec:
            raise ParseError(f"{kind} record missing field {name!r}", lineno)
        if name in VECTOR_SIZES:
            val = rec[name]
            if not isinstance(val, list) or len(val) != VECTOR_SIZES[name]:
                raise ParseError(f"field {name!r} must be a list of {VECTOR_SIZES[name]} numbers", lineno)
    if kind == "encoder" and not isinstance(rec["alpha"], list):
        raise ParseError("field 'alpha' must be a list", lineno)
    if kind == "contact":
        c = rec["contacts"]
        if not isinstance(c, dict) or not all(isinstance(v, bool) for v in c.values()):
            raise ParseError("field 'contacts' must map foot names to booleans", lineno)
    for qname in ("q", "X_q", "C_q"):
        if qname in rec and abs(np.linalg.norm(rec[qname]) - 1.0) > QUAT_TOL:
            raise ParseError(f"quaternion {qname!r} is not unit norm", lineno)


def iter_dataset(path):
    """Stream validated records from a JSONL file."""
    last = -math.inf
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", lineno) from None
            _validate(rec, lineno)
            if rec["t"] < last:
                raise OutOfOrderTimestamp(f"timestamp {rec['t']} earlier than {last}", lineno)
            last = rec["t"]
            yield rec


def read_dataset(path):
    return list(iter_dataset(path))


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(format(float(x), ".17g") for x in row) + "\n")


def read_csv(path):
    """Return ``(header, array)`` for a table written by :func:`write_csv`."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        rows = [[float(x) for x in line.split(",")] for line in f if line.strip()]
    return header, np.array(rows).reshape(len(rows), len(header))


# conversions between in-memory streams and records -------------------------

def _state_fields(X, v, C, bg, ba):
    Xq, Xp = mf.pose_to_qp(X)
    Cq, Cp = mf.pose_to_qp(C)
    return {"X_q": Xq, "X_p": Xp, "v": v, "C_q": Cq, "C_p": Cp, "bg": bg, "ba": ba}


def dataset_to_records(data):
    """Merge the streams of a :class:`~hybrid_contact.sim.Dataset` in time order."""
    items = []
    if data.initial is not None:
        s = data.initial
        rec = {"t": s["t"], "type": "truth"}
        rec.update(_state_fields(s["X"], s["v"], s["C"], s["bg"], s["ba"]))
        items.append((s["t"], 0, 0, rec))
    for k, t in enumerate(data.imu_t):
        items.append((t, 1, k, {"t": t, "type": "imu", "w": data.imu_w[k], "a": data.imu_a[k]}))
    for k, t in enumerate(data.enc_t):
        items.append((t, 2, k, {"t": t, "type": "encoder", "alpha": data.enc_alpha[k]}))
        bits = {f: bool(b) for f, b in zip(data.frames, data.contact[k])}
        items.append((t, 3, k, {"t": t, "type": "contact", "contacts": bits}))
    for n, (t, i, j, L) in enumerate(data.relpose):
        q, p = mf.pose_to_qp(L)
        items.append((t, 4, n, {"t": t, "type": "relpose", "i": int(i), "j": int(j), "q": q, "p": p}))
    items.sort(key=lambda x: (float(x[0]), x[1], x[2]))
    return [x[3] for x in items]


def records_to_dataset(records):
    from .sim import Dataset

    imu, enc, contact, relpose = [], [], [], []
    initial = None
    frames = None
    for rec in records:
        kind = rec["type"]
        if kind == "imu":
            imu.append((rec["t"], rec["w"], rec["a"]))
        elif kind == "encoder":
            enc.append((rec["t"], rec["alpha"]))
        elif kind == "contact":
            if frames is None:
                frames = tuple(rec["contacts"])
            contact.append((rec["t"], [bool(rec["contacts"].get(f, False)) for f in frames]))
        elif kind == "relpose":
            relpose.append((rec["t"], rec["i"], rec["j"], mf.qp_to_pose(rec["q"], rec["p"])))
        elif kind == "truth" and initial is None:
            initial = {"t": rec["t"], "X": mf.qp_to_pose(rec["X_q"], rec["X_p"]),
                       "v": np.array(rec["v"]), "C": mf.qp_to_pose(rec["C_q"], rec["C_p"]),
                       "bg": np.array(rec["bg"]), "ba": np.array(rec["ba"])}
    if len(contact) != len(enc):
        raise ParseError("contact and encoder streams must have the same length")
    return Dataset(
        imu_t=np.array([r[0] for r in imu]), imu_w=np.array([r[1] for r in imu]).reshape(-1, 3),
        imu_a=np.array([r[2] for r in imu]).reshape(-1, 3),
        enc_t=np.array([r[0] for r in enc]),
        enc_alpha=np.array([r[1] for r in enc]),
        contact=np.array([r[1] for r in contact], dtype=bool),
        frames=frames or (), relpose=relpose, initial=initial)


def truth_to_records(truth):
    out = []
    for k, t in enumerate(truth.t):
        rec = {"t": float(t), "type": "truth"}
        rec.update(_state_fields(truth.X[k], truth.v[k], truth.C[k], truth.bg[k], truth.ba[k]))
        out.append(rec)
    return out


def records_to_truth(records):
    """Arrays ``(t, X, v, C)`` from truth records."""
    recs = [r for r in records if r["type"] == "truth"]
    t = np.array([r["t"] for r in recs])
    X = np.array([mf.qp_to_pose(r["X_q"], r["X_p"]) for r in recs])
    C = np.array([mf.qp_to_pose(r["C_q"], r["C_p"]) for r in recs])
    v = np.array([r["v"] for r in recs])
    return t, X, v, C
