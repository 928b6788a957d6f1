"""File formats: experiment configs, federations, traces, metrics and reports.

Every file written here starts with a version marker (a ``# fedflex-... v1``
comment line for text formats, a leading ``"version"`` key for JSON) and every
reader rejects versions it does not know.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .membership import MembershipEvent
from .objectives import Federation, LogisticObjective, QuadraticObjective, random_quadratic_federation
from .participation import TRACE_STATS, ParticipationModel, generate_trace

CONFIG_VERSION = "fedflex-config v1"
FEDERATION_VERSION = "fedflex-federation v1"
MEMBERSHIP_VERSION = "fedflex-membership v1"
REPORT_VERSION = "fedflex-report v1"
TRACE_VERSION = "fedflex-trace v1"
METRICS_VERSION = "fedflex-metrics v1"

METRIC_COLUMNS = ("round", "scheme", "eta", "dist_sq", "global_loss", "sum_ps", "K", "discarded", "inactive_any")


class FormatError(ValueError):
    """Malformed or unsupported file."""


def _check_version(found, expected: str, what: str) -> None:
    if found != expected:
        raise FormatError(f"unsupported {what} version {found!r}; expected {expected!r}")


def _load_json(path: Path, expected: str, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    _check_version(data.get("version"), expected, what)
    return data


def _dump_json(data: dict, version: str) -> str:
    return json.dumps({"version": version, **data}, indent=2, allow_nan=True) + "\n"


# --------------------------------------------------------------------------
# objectives


def objective_to_dict(obj) -> dict:
    if isinstance(obj, QuadraticObjective):
        return {"type": "quadratic", "A": obj.A.tolist(), "b": obj.b.tolist(), "c": obj.c, "sigma": obj.sigma}
    if isinstance(obj, LogisticObjective):
        return {"type": "logistic", "X": obj.X.tolist(), "y": obj.y.tolist(), "lam": obj.lam, "batch": obj.batch}
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def objective_from_dict(d: dict):
    kind = d.get("type")
    if kind == "quadratic":
        return QuadraticObjective(np.array(d["A"], dtype=float), np.array(d["b"], dtype=float), float(d.get("c", 0.0)), float(d.get("sigma", 0.0)))
    if kind == "logistic":
        return LogisticObjective(np.array(d["X"], dtype=float), np.array(d["y"], dtype=float), float(d["lam"]), int(d["batch"]))
    raise FormatError(f"unknown objective type {kind!r}")


def federation_from_dict(d: dict) -> Federation:
    """Explicit ``clients`` list, or a ``generator`` block for seeded random quadratics."""
    if "generator" in d:
        g = dict(d["generator"])
        if g.pop("kind", "random_quadratic") != "random_quadratic":
            raise FormatError("only the random_quadratic generator is supported")
        rng = np.random.default_rng(int(g.pop("seed", 0)))
        if "eig_range" in g:
            g["eig_range"] = tuple(g["eig_range"])
        return random_quadratic_federation(int(g.pop("dim")), int(g.pop("n_clients")), rng, **g)
    clients = [objective_from_dict(c) for c in d["clients"]]
    n = [float(c.get("n_samples", 1.0)) for c in d["clients"]]
    return Federation(clients, n)


def federation_to_dict(fed: Federation) -> dict:
    out = []
    for obj, n in zip(fed.clients, fed.n_samples):
        out.append({**objective_to_dict(obj), "n_samples": float(n)})
    return {"clients": out}


def write_federation(path, fed: Federation) -> None:
    Path(path).write_text(_dump_json(federation_to_dict(fed), FEDERATION_VERSION))


def read_federation(path) -> Federation:
    return federation_from_dict(_load_json(path, FEDERATION_VERSION, "federation"))


# --------------------------------------------------------------------------
# traces


def format_trace(fractions: Sequence[float], E: int) -> str:
    x = np.asarray(fractions, dtype=float)
    head = f"# {TRACE_VERSION} E={E} mean={x.mean():.6f} stdev={x.std():.6f}\n"
    return head + "".join(f"{f:.6f}\n" for f in x)


def write_trace(path, fractions: Sequence[float], E: int) -> None:
    Path(path).write_text(format_trace(fractions, E))


def read_trace(path) -> tuple[np.ndarray, int]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing trace header")
    parts = lines[0][1:].split()
    _check_version(" ".join(parts[:2]), TRACE_VERSION, "trace")
    meta = dict(p.split("=", 1) for p in parts[2:])
    try:
        fractions = np.array([float(s) for s in lines[1:] if s.strip()])
        E = int(meta["E"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed trace ({exc})") from exc
    if fractions.size == 0 or np.any((fractions < 0) | (fractions > 1)):
        raise FormatError(f"{path}: fractions must be non-empty and within [0, 1]")
    return fractions, E


def trace_rng(seed: int, name: str, client: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, sorted(TRACE_STATS).index(name), client])


# --------------------------------------------------------------------------
# membership scripts


def event_from_dict(d: dict, E: int) -> MembershipEvent:
    kind = d["kind"]
    part = ParticipationModel.from_dict(d["participation"], E) if d.get("participation") else None
    if kind == "arrival":
        client = objective_from_dict(d["client"])
    else:
        client = int(d["client"])
    return MembershipEvent(
        round=int(d["round"]),
        kind=kind,
        client=client,
        n_samples=float(d.get("n_samples", 1.0)),
        fast_reboot_delta0=float(d.get("fast_reboot_delta0", 0.0)),
        policy=d.get("policy", "exclude"),
        participation=part,
    )


def read_membership(path, E: int) -> list[MembershipEvent]:
    data = _load_json(path, MEMBERSHIP_VERSION, "membership script")
    return [event_from_dict(e, E) for e in data["events"]]


# --------------------------------------------------------------------------
# experiment configs


@dataclass
class ExperimentSpec:
    federation: Federation
    participation: list[ParticipationModel]
    schemes: list[str]
    seeds: list[int]
    T: int
    E: int
    lr: dict = field(default_factory=lambda: {"kind": "staircase", "eta0": 0.1})
    membership: list[MembershipEvent] = field(default_factory=list)
    w0: np.ndarray | None = None
    options: dict[str, Any] = field(default_factory=dict)
    levels: dict[str, list[ParticipationModel]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.schemes:
            raise ValueError("at least one scheme is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(self.participation) != self.federation.size:
            raise ValueError(
                f"{len(self.participation)} participation entries for {self.federation.size} clients"
            )


def _participation_entry(entry, E: int, base: Path, client: int, trace_seed: int, trace_len: int):
    if isinstance(entry, str):
        if entry not in TRACE_STATS:
            raise FormatError(f"unknown trace name {entry!r}")
        return ParticipationModel.trace(generate_trace(entry, trace_len, E, trace_rng(trace_seed, entry, client)), E)
    if "trace_file" in entry:
        fractions, _ = read_trace(_resolve(base, entry["trace_file"]))
        return ParticipationModel.trace(fractions, E)
    return ParticipationModel.from_dict(entry, E)


def _participation_list(spec, n: int, E: int, base: Path, trace_seed: int, trace_len: int):
    if isinstance(spec, dict) and "all" in spec:
        spec = [spec["all"]] * n
    if isinstance(spec, dict) and "groups" in spec:
        out = []
        for g in spec["groups"]:
            out += [g["model"]] * int(g["count"])
        spec = out
    if not isinstance(spec, list):
        raise FormatError("participation must be a list, {'all': ...} or {'groups': [...]}")
    return [_participation_entry(e, E, base, k, trace_seed, trace_len) for k, e in enumerate(spec)]


def _resolve(base: Path, ref) -> Path:
    path = Path(ref)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise FileNotFoundError(f"referenced file {path} does not exist")
    return path


def spec_from_dict(d: dict, base: Path = Path(".")) -> ExperimentSpec:
    _check_version(d.get("version"), CONFIG_VERSION, "config")
    E, T = int(d["E"]), int(d["T"])
    fed_ref = d["federation"]
    fed = read_federation(_resolve(base, fed_ref)) if isinstance(fed_ref, str) else federation_from_dict(fed_ref)
    trace_seed = int(d.get("trace_seed", 0))
    trace_len = int(d.get("trace_length", 1000))
    part = _participation_list(d.get("participation", {"all": {"kind": "always_full"}}), fed.size, E, base, trace_seed, trace_len)
    levels = {
        name: _participation_list(v, fed.size, E, base, trace_seed, trace_len) for name, v in d.get("levels", {}).items()
    }
    mem_ref = d.get("membership")
    if isinstance(mem_ref, str):
        membership = read_membership(_resolve(base, mem_ref), E)
    else:
        membership = [event_from_dict(e, E) for e in (mem_ref or [])]
    w0 = np.array(d["w0"], dtype=float) if "w0" in d else None
    known = {"version", "E", "T", "federation", "participation", "levels", "membership", "w0", "schemes", "seeds", "lr", "trace_seed", "trace_length"}
    return ExperimentSpec(
        federation=fed,
        participation=part,
        schemes=list(d.get("schemes", ["C"])),
        seeds=[int(s) for s in d.get("seeds", [0])],
        T=T,
        E=E,
        lr=dict(d.get("lr", {"kind": "staircase", "eta0": 0.1})),
        membership=membership,
        w0=w0,
        options={k: v for k, v in d.items() if k not in known},
        levels=levels,
    )


def read_config(path) -> dict:
    """Raw config dict (validated version); ``spec_from_dict`` builds the spec."""
    return _load_json(path, CONFIG_VERSION, "config")


# --------------------------------------------------------------------------
# metrics and reports


def format_metrics(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {METRICS_VERSION}\n")
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_metrics(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(format_metrics(rows))


def read_metrics(path) -> list[dict]:
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    _check_version(first.lstrip("# ").strip(), METRICS_VERSION, "metrics")
    rows = list(csv.DictReader(io.StringIO(rest)))
    if rows and tuple(rows[0].keys()) != METRIC_COLUMNS:
        raise FormatError(f"{path}: unexpected metric columns")
    ints = {"round", "K", "discarded", "inactive_any"}
    return [{k: (v if k == "scheme" else int(v) if k in ints else float(v)) for k, v in r.items()} for r in rows]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def write_report(path, data: dict) -> None:
    Path(path).write_text(_dump_json(_jsonable(data), REPORT_VERSION))


def read_report(path) -> dict:
    return _load_json(path, REPORT_VERSION, "report")
