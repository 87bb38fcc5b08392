"""Feeder description files (TOML) and result tables.

A feeder file is a TOML document::

    format = "gridslack-feeder"
    version = 1
    units = "pu"            # or "si": siemens, ohms, watts, vars, volts
    load_scale = 1.0        # optional multiplier on every load

    [bases]
    s_base = 1.0            # per-phase VA
    [[bases.level]]         # one per voltage level (line-to-neutral volts)
    nominal = 2401.77
    base = 2401.77

    [tpia_defaults]         # all keys optional
    vmin = 0.9
    vmax = 1.1
    enabled = [["632", "A"], ["632", "B"]]
    capacitive_only = false

    [[bus]]
    id = "650"
    phases = "ABC"
    nominal_voltage = 1.0
    kind = "swing"          # or "pq" (default)
    v_base = 2401.77        # optional; overrides the level table

    [[branch]]
    id = "L1"
    from = "650"
    to = "632"
    phases = "ABC"
    series_admittance = ["3.1-9.4j", "-1.2+3.7j", ...]   # row-major k*k
    shunt_admittance = [...]                               # optional, per terminal

    [[transformer]]
    id = "T1"
    from = "mid"
    to = "lv"
    connection = "delta/wye-g"   # or "wye-g/wye-g"
    turns_ratio = 1.7320508075688772
    series_impedance = "0.005+0.02j"
    phases = "ABC"

    [[load]]       bus, phase, p, q
    [[capacitor]]  bus, phase, b
    [[source]]     bus, voltage, angle_deg

Complex values are strings in Python's ``re+imj`` notation; plain numbers are
accepted for purely real entries.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from typing import Optional

import tomli
import tomli_w

from .model import (
    Branch,
    Bus,
    BusKind,
    Capacitor,
    Connection,
    Load,
    Network,
    Source,
    TpiaDefaults,
    Transformer,
    as_matrix,
    canonical_phases,
    require_valid,
)

FORMAT_TAG = "gridslack-feeder"
SUPPORTED_VERSIONS = (1,)

RESULT_COLUMNS = ("bus", "phase", "Vmag_pu", "Vang_deg", "slack_kind", "s1", "s2", "P_inj_pu", "Q_inj_pu")
POWERFLOW_COLUMNS = ("bus", "phase", "Vmag_pu", "Vang_deg")


class ParseError(ValueError):
    """Malformed feeder document. ``line``/``column`` are 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None,
                 path: str = ""):
        self.line = line
        self.column = column
        self.path = path
        where = []
        if line is not None:
            where.append(f"line {line}" + (f", column {column}" if column is not None else ""))
        if path:
            where.append(path)
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)


# record layouts: key -> required?
_TOP = {"format": False, "version": True, "units": False, "load_scale": False, "bases": False,
        "tpia_defaults": False, "bus": True, "branch": False, "transformer": False, "load": False,
        "capacitor": False, "source": False}
_RECORDS = {
    "bus": {"id": True, "phases": False, "nominal_voltage": False, "kind": False, "v_base": False},
    "branch": {"id": False, "from": True, "to": True, "phases": True, "series_admittance": True,
               "shunt_admittance": False},
    "transformer": {"id": False, "from": True, "to": True, "connection": False, "turns_ratio": False,
                    "series_impedance": True, "phases": False},
    "load": {"bus": True, "phase": True, "p": True, "q": False},
    "capacitor": {"bus": True, "phase": True, "b": True},
    "source": {"bus": True, "voltage": False, "angle_deg": False},
}
_BASES = {"s_base": False, "level": False}
_LEVEL = {"nominal": True, "base": True}
_DEFAULTS = {"vmin": False, "vmax": False, "enabled": False, "capacitive_only": False}


class _Reader:
    """Walks the decoded document, mapping structural errors back to source lines."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def locate(self, table: str, index: Optional[int], key: Optional[str]) -> Optional[int]:
        header = re.compile(r"^\s*\[\[\s*" + re.escape(table) + r"\s*\]\]") if index is not None \
            else re.compile(r"^\s*\[\s*" + re.escape(table) + r"\s*\]")
        any_header = re.compile(r"^\s*\[")
        start, seen = None, -1
        for n, ln in enumerate(self.lines):
            if header.match(ln):
                seen += 1
                if index is None or seen == index:
                    start = n
                    break
        if start is None:
            return None
        if key is None:
            return start + 1
        keypat = re.compile(r"^\s*\"?" + re.escape(key) + r"\"?\s*=")
        for n in range(start + 1, len(self.lines)):
            if any_header.match(self.lines[n]):
                break
            if keypat.match(self.lines[n]):
                return n + 1
        return start + 1

    def locate_top(self, key: str) -> Optional[int]:
        pat = re.compile(r"^\s*(\[+\s*)?\"?" + re.escape(key) + r"\b")
        for n, ln in enumerate(self.lines):
            if pat.match(ln):
                return n + 1
        return None

    def fail(self, message, table, index=None, key=None):
        path = table + (f"[{index}]" if index is not None else "") + (f".{key}" if key else "")
        raise ParseError(message, self.locate(table, index, key), None, path)

    def check_keys(self, rec, layout, table, index=None):
        if not isinstance(rec, dict):
            self.fail(f"{table} must be a table", table, index)
        for key in rec:
            if key not in layout:
                self.fail(f"unknown key {key!r}", table, index, key)
        for key, required in layout.items():
            if required and key not in rec:
                self.fail(f"missing required key {key!r}", table, index)

    def number(self, rec, key, table, index=None, default=None):
        if key not in rec:
            return default
        v = rec[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"{key} must be a number", table, index, key)
        return float(v)

    def string(self, rec, key, table, index=None, default=None):
        if key not in rec:
            return default
        v = rec[key]
        if not isinstance(v, str):
            self.fail(f"{key} must be a string", table, index, key)
        return v

    def complex_value(self, v, table, index, key):
        if isinstance(v, bool):
            self.fail(f"{key}: expected a complex number, got a boolean", table, index, key)
        if isinstance(v, (int, float)):
            return complex(float(v), 0.0)
        if isinstance(v, str):
            try:
                return complex(v.replace(" ", ""))
            except ValueError:
                pass
        self.fail(f"{key}: cannot read {v!r} as a complex number", table, index, key)

    def matrix(self, rec, key, table, index, k):
        if key not in rec:
            return None
        v = rec[key]
        if not isinstance(v, list):
            self.fail(f"{key} must be an array", table, index, key)
        flat = []
        for item in v:
            if isinstance(item, list):
                flat.extend(self.complex_value(x, table, index, key) for x in item)
            else:
                flat.append(self.complex_value(item, table, index, key))
        if len(flat) != k * k:
            self.fail(f"{key} needs {k * k} entries for {k} phase(s), got {len(flat)}", table, index, key)
        return as_matrix(flat, k)

    def phases(self, rec, key, table, index, default=None):
        s = self.string(rec, key, table, index, default)
        try:
            return canonical_phases(s)
        except ValueError as exc:
            self.fail(str(exc), table, index, key)


def parse_feeder(text: str, validate: bool = True) -> Network:
    """Read a feeder document. Structural problems raise ParseError with a position;
    with ``validate`` the network is also checked (ValidationError)."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    r = _Reader(text)

    for key in doc:
        if key not in _TOP:
            raise ParseError(f"unknown top-level key {key!r}", r.locate_top(key), None, key)
    fmt = doc.get("format", FORMAT_TAG)
    if fmt != FORMAT_TAG:
        raise ParseError(f"unrecognized format {fmt!r}", None, None, "format")
    if "version" not in doc:
        raise ParseError("missing version tag", None, None, "version")
    if doc["version"] not in SUPPORTED_VERSIONS or isinstance(doc["version"], bool):
        raise ParseError(f"unsupported version {doc['version']!r}", None, None, "version")
    units = doc.get("units", "pu")
    if units not in ("pu", "si"):
        raise ParseError(f"units must be 'pu' or 'si', got {units!r}", None, None, "units")
    load_scale = doc.get("load_scale", 1.0)
    if isinstance(load_scale, bool) or not isinstance(load_scale, (int, float)) or not load_scale > 0:
        raise ParseError("load_scale must be a positive number", None, None, "load_scale")

    s_base, v_bases = 1.0, ()
    if "bases" in doc:
        bases = doc["bases"]
        r.check_keys(bases, _BASES, "bases")
        s_base = r.number(bases, "s_base", "bases", default=1.0)
        levels = bases.get("level", [])
        if not isinstance(levels, list):
            r.fail("bases.level must be an array of tables", "bases", None, "level")
        lv = []
        for i, lvl in enumerate(levels):
            r.check_keys(lvl, _LEVEL, "bases.level", i)
            lv.append((r.number(lvl, "nominal", "bases.level", i), r.number(lvl, "base", "bases.level", i)))
        v_bases = tuple(lv)

    def records(table):
        recs = doc.get(table, [])
        if not isinstance(recs, list):
            r.fail(f"{table} must be an array of tables ([[{table}]])", table)
        for i, rec in enumerate(recs):
            r.check_keys(rec, _RECORDS[table], table, i)
            yield i, rec

    buses, seen = [], set()
    for i, rec in records("bus"):
        bid = r.string(rec, "id", "bus", i)
        if bid in seen:
            r.fail(f"duplicate bus id {bid!r}", "bus", i, "id")
        seen.add(bid)
        kind = r.string(rec, "kind", "bus", i, "pq").upper()
        if kind not in BusKind.__members__:
            r.fail(f"unknown bus kind {rec['kind']!r}", "bus", i, "kind")
        buses.append(Bus(bid, r.phases(rec, "phases", "bus", i, "ABC"),
                         r.number(rec, "nominal_voltage", "bus", i, 1.0), BusKind[kind],
                         r.number(rec, "v_base", "bus", i)))

    # phase count of an element fixes the matrix size
    branches = []
    for i, rec in records("branch"):
        ph = r.phases(rec, "phases", "branch", i)
        branches.append(Branch(
            r.string(rec, "from", "branch", i), r.string(rec, "to", "branch", i), ph,
            r.matrix(rec, "series_admittance", "branch", i, len(ph)),
            r.matrix(rec, "shunt_admittance", "branch", i, len(ph)),
            r.string(rec, "id", "branch", i, ""),
        ))

    transformers = []
    for i, rec in records("transformer"):
        conn = r.string(rec, "connection", "transformer", i, Connection.WYE_WYE.value)
        try:
            conn = Connection(conn)
        except ValueError:
            r.fail(f"unknown connection {conn!r}", "transformer", i, "connection")
        transformers.append(Transformer(
            r.string(rec, "from", "transformer", i), r.string(rec, "to", "transformer", i), conn,
            r.number(rec, "turns_ratio", "transformer", i, 1.0),
            r.complex_value(rec["series_impedance"], "transformer", i, "series_impedance"),
            r.phases(rec, "phases", "transformer", i, "ABC"),
            r.string(rec, "id", "transformer", i, ""),
        ))

    loads = [Load(r.string(rec, "bus", "load", i), r.phases(rec, "phase", "load", i),
                  r.number(rec, "p", "load", i), r.number(rec, "q", "load", i, 0.0))
             for i, rec in records("load")]
    caps = [Capacitor(r.string(rec, "bus", "capacitor", i), r.phases(rec, "phase", "capacitor", i),
                      r.number(rec, "b", "capacitor", i))
            for i, rec in records("capacitor")]
    sources = [Source(r.string(rec, "bus", "source", i), r.number(rec, "voltage", "source", i, 1.0),
                      r.number(rec, "angle_deg", "source", i, 0.0))
               for i, rec in records("source")]
    for what, items in (("load", loads), ("capacitor", caps)):
        for i, it in enumerate(items):
            if len(it.phase) != 1:
                r.fail(f"{what} attaches to a single phase", what, i, "phase")

    defaults = None
    if "tpia_defaults" in doc:
        td = doc["tpia_defaults"]
        r.check_keys(td, _DEFAULTS, "tpia_defaults")
        enabled = None
        if "enabled" in td:
            raw = td["enabled"]
            ok = isinstance(raw, list) and all(
                isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e) for e in raw)
            if not ok:
                r.fail("enabled must be a list of [bus, phase] pairs", "tpia_defaults", None, "enabled")
            enabled = tuple((b, p) for b, p in raw)
        cap_only = td.get("capacitive_only", False)
        if not isinstance(cap_only, bool):
            r.fail("capacitive_only must be a boolean", "tpia_defaults", None, "capacitive_only")
        defaults = TpiaDefaults(r.number(td, "vmin", "tpia_defaults"), r.number(td, "vmax", "tpia_defaults"),
                                enabled, cap_only)

    net = Network(
        buses=tuple(buses),
        branches=tuple(branches),
        transformers=tuple(transformers),
        loads=tuple(loads),
        capacitors=tuple(caps),
        sources=tuple(sources),
        units=units,
        s_base=s_base,
        v_bases=v_bases,
        tpia_defaults=defaults,
        load_scale=float(load_scale),
    )
    return require_valid(net) if validate else net


def load_feeder(path, validate: bool = True) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_feeder(fh.read(), validate)


# ---------------------------------------------------------------------------
# writing


def format_complex(z: complex) -> str:
    """Lossless ``re+imj`` text for a complex number."""
    z = complex(z)
    im = repr(z.imag)
    if not im.startswith("-"):
        im = "+" + im
    return f"{z.real!r}{im}j"


def _flat(m):
    return [format_complex(v) for row in m for v in row]


def feeder_document(network: Network) -> dict:
    doc = {"format": FORMAT_TAG, "version": 1, "units": network.units}
    if network.load_scale != 1.0:
        doc["load_scale"] = network.load_scale
    doc["bases"] = {"s_base": network.s_base}
    if network.v_bases:
        doc["bases"]["level"] = [{"nominal": n, "base": b} for n, b in network.v_bases]
    td = network.tpia_defaults
    if td is not None:
        d = {}
        if td.vmin is not None:
            d["vmin"] = td.vmin
        if td.vmax is not None:
            d["vmax"] = td.vmax
        if td.enabled is not None:
            d["enabled"] = [[b, p] for b, p in td.enabled]
        if td.capacitive_only:
            d["capacitive_only"] = True
        doc["tpia_defaults"] = d
    doc["bus"] = []
    for b in network.buses:
        rec = {"id": b.id, "phases": b.phases, "nominal_voltage": b.nominal_voltage, "kind": b.kind.value.lower()}
        if b.v_base is not None:
            rec["v_base"] = b.v_base
        doc["bus"].append(rec)
    if network.branches:
        doc["branch"] = []
        for br in network.branches:
            rec = {"id": br.id, "from": br.from_bus, "to": br.to_bus, "phases": br.phases,
                   "series_admittance": _flat(br.series_admittance)}
            if br.shunt_admittance is not None:
                rec["shunt_admittance"] = _flat(br.shunt_admittance)
            doc["branch"].append(rec)
    if network.transformers:
        doc["transformer"] = [
            {"id": t.id, "from": t.from_bus, "to": t.to_bus, "connection": Connection(t.connection).value,
             "turns_ratio": t.turns_ratio, "series_impedance": format_complex(t.series_impedance),
             "phases": t.phases}
            for t in network.transformers]
    if network.loads:
        doc["load"] = [{"bus": ld.bus, "phase": ld.phase, "p": ld.p, "q": ld.q} for ld in network.loads]
    if network.capacitors:
        doc["capacitor"] = [{"bus": c.bus, "phase": c.phase, "b": c.b} for c in network.capacitors]
    if network.sources:
        doc["source"] = [{"bus": s.bus, "voltage": s.voltage, "angle_deg": s.angle_deg}
                         for s in network.sources]
    return doc


def serialize_feeder(network: Network) -> str:
    """TOML text with every record under its own ``[[kind]]`` header."""
    doc = feeder_document(network)
    top = {k: v for k, v in doc.items() if not isinstance(v, (dict, list))}
    parts = [tomli_w.dumps(top)]
    bases = dict(doc["bases"])
    levels = bases.pop("level", [])
    parts.append("[bases]\n" + tomli_w.dumps(bases))
    parts.extend("[[bases.level]]\n" + tomli_w.dumps(lvl) for lvl in levels)
    if "tpia_defaults" in doc:
        parts.append("[tpia_defaults]\n" + tomli_w.dumps(doc["tpia_defaults"]))
    for kind in _RECORDS:
        parts.extend(f"[[{kind}]]\n" + tomli_w.dumps(rec) for rec in doc.get(kind, []))
    return "\n".join(parts)


def save_feeder(network: Network, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_feeder(network))


# ---------------------------------------------------------------------------
# result tables


def _natural(s: str):
    return tuple((0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", s) if t)


def _num(x: float) -> str:
    x = float(x) + 0.0  # no "-0.0" in output
    return repr(x) if math.isfinite(x) else str(x)


@dataclass(frozen=True)
class ResultTable:
    columns: tuple
    rows: list  # list of tuples of str
    totals: Optional[tuple] = None
    summary: tuple = ()  # (key, value) pairs shown above the table


def result_table(report) -> ResultTable:
    """Rows per enabled node-phase, ordered by bus id then phase."""
    volts = report.state.as_dict() if report.state is not None else {}
    vals = report.slack.values if report.slack is not None else []
    entries = []
    for (bus, ph), (s1, s2), inj in zip(report.enabled, vals, report.injections):
        v = volts.get((bus, ph), complex("nan"))
        entries.append((_natural(bus), ph, (
            bus, ph, _num(abs(v)), _num(math.degrees(math.atan2(v.imag, v.real))), report.label,
            _num(s1), _num(s2), _num(inj.real), _num(inj.imag))))
    entries.sort(key=lambda e: (e[0], e[1]))
    totals = ("TOTAL", "", "", "", report.label, "", "", _num(report.total_p), _num(report.total_q))
    summary = (
        ("status", report.status),
        ("formulation", report.label),
        ("iterations", str(report.iterations)),
        ("kkt_residual", _num(report.kkt_residual)),
        ("objective", _num(report.objective)),
        ("homotopy", f"{report.homotopy_steps} steps" if report.homotopy_used else "not used"),
    )
    if report.message:
        summary += (("message", report.message),)
    return ResultTable(RESULT_COLUMNS, [e[2] for e in entries], totals, summary)


def powerflow_table(result) -> ResultTable:
    st = result.state
    entries = sorted(
        ((_natural(b), p), (b, p, _num(m), _num(a)))
        for (b, p), m, a in zip(st.index, st.magnitude(), st.angle_deg()))
    summary = (("status", "converged"), ("iterations", str(result.iterations)),
               ("residual", _num(result.residual)))
    if result.homotopy_steps:
        summary += (("homotopy", f"{result.homotopy_steps} steps"),)
    return ResultTable(POWERFLOW_COLUMNS, [row for _, row in entries], None, summary)


def render(table: ResultTable, fmt: str = "table") -> str:
    rows = list(table.rows) + ([table.totals] if table.totals else [])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown output format {fmt!r}")
    out = [f"{k}: {v}" for k, v in table.summary]
    widths = [max([len(c)] + [len(r[j]) for r in rows]) for j, c in enumerate(table.columns)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    if out:
        out.append("")
    out.append(line(table.columns))
    out.append(line(["-" * w for w in widths]))
    out.extend(line(r) for r in table.rows)
    if table.totals:
        out.append(line(["-" * w for w in widths]))
        out.append(line(table.totals))
    return "\n".join(out) + "\n"


def write_results(report, fmt: str = "table") -> str:
    """Format a SolveReport; totals are plain sums of |P_f| and |Q_f|."""
    return render(result_table(report), fmt)


def write_powerflow(result, fmt: str = "table") -> str:
    return render(powerflow_table(result), fmt)
