"""Scenario configuration: YAML loading, overrides, validation.

Scenario files are YAML.  Every validation problem is reported with its
dotted config path and the line it came from.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..network import Link, Topology
from ..scheduling import PlanError, check_plan

PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"


class ConfigError(ValueError):
    """One or more configuration problems; ``problems`` holds (path, line, message)."""

    def __init__(self, problems: list[tuple[str, int | None, str]], source: str = ""):
        self.problems = problems
        self.source = source
        lines = []
        for path, line, msg in problems:
            where = f"{source}:{line}" if line else source
            lines.append(f"{where}: {path or '<root>'}: {msg}")
        super().__init__("\n".join(lines))


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -- topology -----------------------------------------------------------------

class LinkCfg(_Model):
    a: str
    b: str
    capacity: float = Field(description="bits/s")
    rtt_ms: float = 0.0
    schedule: list[tuple[float, float]] = Field(default_factory=list)

    @field_validator("capacity")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("capacity must be positive")
        return v

    @field_validator("rtt_ms")
    @classmethod
    def _rtt(cls, v: float) -> float:
        if v < 0:
            raise ValueError("rtt_ms must be non-negative")
        return v

    @field_validator("schedule")
    @classmethod
    def _schedule(cls, v: list[tuple[float, float]]) -> list[tuple[float, float]]:
        times = [t for t, _ in v]
        if any(t <= 0 for t in times):
            raise ValueError("schedule breakpoints must be after t=0")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("schedule breakpoints must be strictly increasing")
        if any(c <= 0 for _, c in v):
            raise ValueError("capacity must be positive on every schedule segment")
        return v


class TopologyCfg(_Model):
    window_bytes: float = 8e6
    nodes: list[str]
    links: dict[str, LinkCfg]
    routes: dict[str, list[str]] = Field(default_factory=dict)

    def build(self) -> Topology:
        links = [Link(lid, l.a, l.b, l.capacity, l.rtt_ms / 1000.0, list(l.schedule))
                 for lid, l in self.links.items()]
        routes = {}
        for key, hops in self.routes.items():
            s, _, d = key.partition(">")
            routes[(s, d)] = hops
        return Topology(self.nodes, links, routes)


# -- grid (T0/T1) -----------------------------------------------------------------

class CenterCfg(_Model):
    utc_offset: float = 0.0
    cpus: int = 100
    cpu_rate: float = 1e9
    threshold: Optional[float] = None
    disk: float = math.inf
    service_time: float = 0.0
    parallelism: int = 1
    tape: float = math.inf
    mount_latency: float = 60.0

    @field_validator("cpus", "parallelism")
    @classmethod
    def _count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("cpu_rate", "disk", "tape")
    @classmethod
    def _pos(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("service_time", "mount_latency")
    @classmethod
    def _nonneg(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be non-negative")
        return v


class SizeCfg(_Model):
    mean: float
    relative_sd: float = 0.1

    @model_validator(mode="after")
    def _check(self) -> "SizeCfg":
        if not self.mean > 0:
            raise ValueError("mean must be positive")
        if self.relative_sd < 0:
            raise ValueError("relative_sd must be non-negative")
        return self


class RawReplicationCfg(_Model):
    enabled: bool = True
    source: str = "T0"
    recording_rate: float = 2e8
    file_size: SizeCfg = SizeCfg(mean=2e9, relative_sd=0.1)
    destinations: list[str] = Field(default_factory=list)

    @field_validator("recording_rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("recording_rate must be positive")
        return v


class ProductionCfg(_Model):
    enabled: bool = True
    center: str = "T0"
    dst_ratio: float = 0.1
    dst_sd: float = 0.1
    cpu_work_per_raw: float = 1.8e12
    destinations: list[str] = Field(default_factory=list)


class ReproductionCfg(_Model):
    enabled: bool = True
    start_time: float = 43200.0
    centers: list[str] = Field(default_factory=list)
    include_t0: bool = False
    t0: str = "T0"
    dst_ratio: float = 0.1
    dst_sd: float = 0.1
    cpu_work_per_raw: float = 1.8e12


class AnalysisCfg(_Model):
    enabled: bool = True
    centers: list[str] = Field(default_factory=list)
    local_start: str = "09:00"
    window_hours: float = 12.0
    start_utc_hours: float = 0.0
    max_parallel: int = 0

    @field_validator("local_start")
    @classmethod
    def _clock(cls, v: str) -> str:
        h, _, m = v.partition(":")
        if not (h.isdigit() and m.isdigit() and 0 <= int(h) < 24 and 0 <= int(m) < 60):
            raise ValueError("local_start must look like HH:MM")
        return v

    @property
    def local_start_hours(self) -> float:
        h, _, m = self.local_start.partition(":")
        return int(h) + int(m) / 60.0


class ActivitiesCfg(_Model):
    raw_replication: RawReplicationCfg = RawReplicationCfg()
    production: ProductionCfg = ProductionCfg()
    reproduction: ReproductionCfg = ReproductionCfg()
    analysis: AnalysisCfg = AnalysisCfg()


class AgentsCfg(_Model):
    enabled: bool = True
    relays: dict[str, list[str]] = Field(default_factory=dict)

    @property
    def active_relays(self) -> dict[str, list[str]]:
        return self.relays if self.enabled else {}


class SchedulerCfg(_Model):
    threshold: float = 0.8
    export: bool = True


# -- PROOF ----------------------------------------------------------------------

class ProofCfg(_Model):
    n_masters: int = 20
    m_slaves: int = 500
    s_servers: int = 4
    slaves_per_master: int = 25
    p_local: float = 0.5
    packet_events: int = 1000
    events_per_request: int = 100000
    event_size_bytes: float = 1e5
    master_handle_time: float = 0.05
    server_service_time: float = 0.5
    server_parallelism: int = 1
    server_replicas: int = 1
    cpu_rate: float = 1e9
    request_cpu_work: float = 9e12
    lan_bps: float = 5e8
    server_lan_bps: Optional[float] = None
    mode: Literal["single", "repeated"] = "single"
    requests_per_master: int = 1
    think_time_mean: float = 300.0

    @model_validator(mode="after")
    def _check(self) -> "ProofCfg":
        for name in ("n_masters", "m_slaves", "s_servers", "slaves_per_master", "packet_events",
                     "events_per_request", "server_parallelism", "server_replicas", "requests_per_master"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.p_local <= 1.0:
            raise ValueError("p_local must be in [0, 1]")
        if self.slaves_per_master * self.n_masters < self.m_slaves:
            raise ValueError("slaves_per_master * n_masters must cover every slave station")
        if self.server_replicas > self.s_servers:
            raise ValueError("server_replicas cannot exceed s_servers")
        for name in ("cpu_rate", "request_cpu_work", "lan_bps", "event_size_bytes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.server_lan_bps is not None and not self.server_lan_bps > 0:
            raise ValueError("server_lan_bps must be positive")
        if self.master_handle_time < 0 or self.server_service_time < 0 or self.think_time_mean < 0:
            raise ValueError("times must be non-negative")
        return self


# -- top level ---------------------------------------------------------------------

class ScenarioCfg(_Model):
    scenario: Literal["t0t1", "proof"]
    name: str = ""
    seed: int = 1
    duration: float = 86400.0
    metrics_interval: float = 300.0
    same_time_limit: int = 10**6
    topology: Optional[TopologyCfg] = None
    centers: dict[str, CenterCfg] = Field(default_factory=dict)
    agents: AgentsCfg = AgentsCfg()
    scheduler: SchedulerCfg = SchedulerCfg()
    activities: ActivitiesCfg = ActivitiesCfg()
    proof: Optional[ProofCfg] = None

    @field_validator("duration", "metrics_interval")
    @classmethod
    def _pos(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v


# ---------------------------------------------------------------------------
# YAML with line numbers
# ---------------------------------------------------------------------------

def _line_map(text: str) -> dict[tuple, int]:
    """Map each config path (tuple of keys/indices) to its 1-based source line."""
    lines: dict[tuple, int] = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines

    def walk(node, path: tuple) -> None:
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                lines[path + (key,)] = k.start_mark.line + 1
                walk(v, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return lines


def _lookup_line(lines: dict[tuple, int], path: tuple) -> int | None:
    path = tuple(path)
    while path:
        if path in lines:
            return lines[path]
        path = path[:-1]
    return lines.get(())


def resolve_path(path: str | Path) -> Path:
    """A scenario path, or the name of a shipped preset (with or without .cfg)."""
    p = Path(path)
    if p.exists():
        return p
    for cand in (PRESET_DIR / p.name, PRESET_DIR / f"{p.name}.cfg"):
        if cand.exists():
            return cand
    return p


def parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def apply_override(data: dict, key: str, value: Any) -> None:
    """Set a dotted ``key`` inside nested dicts, creating mappings as needed."""
    parts = key.split(".")
    cur = data
    for part in parts[:-1]:
        if isinstance(cur, list):
            cur = cur[int(part)]
            continue
        nxt = cur.get(part)
        if nxt is None:
            nxt = cur[part] = {}
        cur = nxt
    last = parts[-1]
    if isinstance(cur, list):
        cur[int(last)] = value
    else:
        cur[last] = value


def load_raw(path: str | Path) -> tuple[dict, dict[tuple, int], str]:
    p = resolve_path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([("", None, f"cannot read scenario: {exc}")], str(path)) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError([("", mark.line + 1 if mark else None, f"YAML error: {exc}")], str(p)) from None
    if not isinstance(data, dict):
        raise ConfigError([("", 1, "scenario must be a mapping")], str(p))
    return data, _line_map(text), str(p)


def validate(data: dict, lines: dict[tuple, int] | None = None, source: str = "") -> ScenarioCfg:
    lines = lines or {}
    try:
        cfg = ScenarioCfg.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(x for x in err["loc"] if not (isinstance(x, str) and x.startswith("function-")))
            problems.append((".".join(str(x) for x in loc), _lookup_line(lines, loc), err["msg"]))
        raise ConfigError(problems, source) from None
    problems = [(p, _lookup_line(lines, tuple(p.split("."))), m) for p, m in semantic_problems(cfg)]
    if problems:
        raise ConfigError(problems, source)
    return cfg


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ScenarioCfg:
    """Read, override and validate a scenario file."""
    data, lines, source = load_raw(path)
    for key, value in (overrides or {}).items():
        apply_override(data, key, value)
    return validate(data, lines, source)


def semantic_problems(cfg: ScenarioCfg) -> list[tuple[str, str]]:
    """Cross-field checks the schema cannot express: (dotted path, message)."""
    out: list[tuple[str, str]] = []
    if cfg.scenario == "proof":
        if cfg.proof is None:
            out.append(("proof", "proof scenario needs a proof section"))
        return out
    if cfg.topology is None:
        return [("topology", "t0t1 scenario needs a topology section")]
    topo_cfg = cfg.topology
    nodes = set(topo_cfg.nodes)
    if len(nodes) != len(topo_cfg.nodes):
        out.append(("topology.nodes", "duplicate node ids"))
    for lid, l in topo_cfg.links.items():
        for end in (l.a, l.b):
            if end not in nodes:
                out.append((f"topology.links.{lid}", f"link {lid} references unknown node {end!r}"))
    if out:
        return out
    try:
        topo = topo_cfg.build()
    except ValueError as exc:
        return [("topology", str(exc))]
    if not topo.connected():
        out.append(("topology", "topology is not connected"))
    for c in cfg.centers:
        if c not in nodes:
            out.append((f"centers.{c}", f"center {c} is not a topology node"))
    try:
        check_plan(cfg.agents.relays)
    except PlanError as exc:
        out.append(("agents.relays", str(exc)))
    for relay, down in cfg.agents.relays.items():
        for n in [relay, *down]:
            if n not in cfg.centers:
                out.append((f"agents.relays.{relay}", f"relay plan names unknown center {n!r}"))
    acts = cfg.activities
    checks = []
    if acts.raw_replication.enabled:
        checks += [("activities.raw_replication.source", [acts.raw_replication.source]),
                   ("activities.raw_replication.destinations", acts.raw_replication.destinations)]
        if not acts.raw_replication.destinations:
            out.append(("activities.raw_replication.destinations", "destinations must not be empty"))
    if acts.production.enabled:
        checks += [("activities.production.center", [acts.production.center]),
                   ("activities.production.destinations", acts.production.destinations)]
    if acts.reproduction.enabled:
        checks += [("activities.reproduction.centers", acts.reproduction.centers)]
    if acts.analysis.enabled:
        checks += [("activities.analysis.centers", acts.analysis.centers)]
    for path, names in checks:
        for n in names:
            if n not in cfg.centers:
                out.append((path, f"unknown center {n!r}"))
    if out:
        return out
    # every center pair that may exchange data needs a route
    for a in cfg.centers:
        for b in cfg.centers:
            if a != b:
                try:
                    topo.path(a, b)
                except Exception as exc:  # NoRouteError
                    out.append(("topology.routes", str(exc)))
    return out


def dump_resolved(cfg: ScenarioCfg) -> str:
    """The validated config with every default filled in, as YAML."""
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return yaml.safe_dump(plain(cfg.model_dump()), sort_keys=False, default_flow_style=None)

