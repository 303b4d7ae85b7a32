"""YAML scenario files: parsing with line-anchored diagnostics, sweeps, bundled corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import yaml

from .model import (Host, InvalidInstance, LinkMatrix, ProblemInstance, ServiceClass, ValidatedInstance, VnfQueue,
                    validate_instance)
from .replicas import replica_id

SCHEMA_VERSION = 1
SWEEP_PARAMETERS = ("links.delay", "links.delay_scale", "classes.rate_scale")


@dataclass(frozen=True)
class ParseIssue:
    line: int | None
    path: str
    message: str

    def format(self, source: str = "") -> str:
        where = f"{source}:{self.line}" if self.line is not None else (source or "<scenario>")
        return f"{where}: {self.path}: {self.message}"


class ScenarioError(ValueError):
    def __init__(self, issues: list[ParseIssue], source: str = ""):
        self.issues = issues
        self.source = source
        super().__init__("\n".join(i.format(source) for i in issues))


@dataclass(frozen=True)
class Sweep:
    parameter: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class SplitSearchSpec:
    f0: float = 0.5
    delta0: float = 0.25
    epsilon: float = 0.05


@dataclass
class Scenario:
    id: str
    description: str
    raw: ProblemInstance
    instance: ValidatedInstance
    sweep: Sweep | None = None
    split: dict[str, tuple[float, ...]] | None = None
    split_search: SplitSearchSpec | None = None
    placement: dict[str, str] | None = None  # VNF (or replica) id -> host id
    source: str = ""
    reconstruction: bool = False

    def at(self, value: float | None) -> ValidatedInstance:
        """Instance with the sweep parameter set to ``value`` (None = base)."""
        if value is None or self.sweep is None:
            return self.instance
        return validate_instance(apply_sweep(self.raw, self.sweep.parameter, value))


def apply_sweep(raw: ProblemInstance, parameter: str, value: float) -> ProblemInstance:
    if parameter == "links.delay":
        n = len(raw.hosts)
        delay = tuple(tuple(0.0 if h == l else float(value) for l in range(n)) for h in range(n))
        return replace(raw, links=replace(raw.links, delay=delay))
    if parameter == "links.delay_scale":
        delay = tuple(tuple(float(d) * value for d in row) for row in raw.links.delay)
        return replace(raw, links=replace(raw.links, delay=delay))
    if parameter == "classes.rate_scale":
        classes = [replace(c, external_rate={q: r * value for q, r in c.external_rate.items()})
                   for c in raw.classes]
        return replace(raw, classes=classes)
    raise ValueError(f"unknown sweep parameter '{parameter}'")


# ---------------------------------------------------------------------------
# YAML with positions


class _Node:
    """Plain value plus the line it came from (1-based)."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _convert(node: yaml.Node) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out: dict[str, _Node] = {}
        for k, v in node.value:
            key = _convert(k)
            out[str(key.value)] = _Node(_convert(v), key.line)  # outer line = key position
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_convert(v) for v in node.value], line)
    return _Node(_SCALARS.construct_object(node), line)


_SCALARS = yaml.SafeLoader("")


def _compose(text: str) -> yaml.Node | None:
    return yaml.compose(text, Loader=yaml.SafeLoader)


class _Reader:
    def __init__(self):
        self.issues: list[ParseIssue] = []

    def err(self, node: _Node | None, path: str, message: str):
        self.issues.append(ParseIssue(None if node is None else node.line, path, message))

    def mapping(self, node: _Node, path: str, allowed: set[str], required: set[str] = frozenset()) -> dict | None:
        if not isinstance(node.value, dict):
            self.err(node, path, "expected a mapping")
            return None
        out = {}
        for key, wrapped in node.value.items():
            if key not in allowed:
                self.err(wrapped, f"{path}.{key}" if path else key,
                         f"unknown key '{key}'; allowed: {', '.join(sorted(allowed))}")
                continue
            out[key] = wrapped.value
        for key in sorted(required - set(node.value)):
            self.err(node, path or "<root>", f"missing required key '{key}'")
        return out

    def seq(self, node: _Node | None, path: str) -> list[_Node]:
        if node is None:
            return []
        if not isinstance(node.value, list):
            self.err(node, path, "expected a list")
            return []
        return node.value

    def number(self, node: _Node | None, path: str, default=None, *, positive=False, nonneg=False):
        if node is None:
            return default
        v = node.value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.err(node, path, f"expected a number, got {v!r}")
            return default
        v = float(v)
        if math.isnan(v) or (positive and not v > 0) or (nonneg and not v >= 0):
            self.err(node, path, f"value {v} out of range")
            return default
        return v

    def string(self, node: _Node | None, path: str) -> str | None:
        if node is None:
            return None
        if not isinstance(node.value, (str, int)) or isinstance(node.value, bool):
            self.err(node, path, "expected an identifier")
            return None
        return str(node.value)

    def prob_table(self, node: _Node | None, path: str) -> dict[str, float]:
        if node is None:
            return {}
        if not isinstance(node.value, dict):
            self.err(node, path, "expected a mapping of VNF id to number")
            return {}
        out = {}
        for key, wrapped in node.value.items():
            v = self.number(wrapped.value, f"{path}.{key}", nonneg=True)
            if v is not None:
                out[key] = v
        return out


def parse_scenario(text: str, source: str = "") -> Scenario:
    """Parse and validate one scenario document; raises :class:`ScenarioError`."""
    try:
        root = _compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError([ParseIssue(line, "<yaml>", str(getattr(exc, "problem", exc)))], source) from None
    if root is None:
        raise ScenarioError([ParseIssue(None, "<root>", "empty document")], source)
    doc = _convert(root)
    rd = _Reader()
    top = rd.mapping(doc, "", {"schema_version", "id", "description", "reconstruction", "hosts", "links", "vnfs",
                               "classes", "options", "sweep", "split", "split_search", "placement"},
                     {"schema_version", "hosts", "vnfs", "classes"})
    if top is None:
        raise ScenarioError(rd.issues, source)
    lines: dict[str, int] = {}

    ver = top.get("schema_version")
    if ver is not None and ver.value != SCHEMA_VERSION:
        rd.err(ver, "schema_version", f"unsupported version {ver.value!r}; expected {SCHEMA_VERSION}")

    hosts = []
    for i, hn in enumerate(rd.seq(top.get("hosts"), "hosts")):
        h = rd.mapping(hn, f"hosts[{i}]", {"id", "kappa"}, {"id", "kappa"})
        if h is None:
            continue
        hid = rd.string(h.get("id"), f"hosts[{i}].id")
        kappa = rd.number(h.get("kappa"), f"hosts[{i}].kappa", positive=True)
        if hid is not None and kappa is not None:
            hosts.append(Host(hid, kappa))
            lines[f"hosts[{hid}]"] = hn.line
    host_index = {h.id: i for i, h in enumerate(hosts)}
    n_h = len(hosts)

    delay = [[0.0] * n_h for _ in range(n_h)]
    capacity = [[math.inf] * n_h for _ in range(n_h)]
    links_node = top.get("links")
    if links_node is not None:
        links = rd.mapping(links_node, "links", {"delay", "capacity", "pairs"})
        if links is not None:
            d = rd.number(links.get("delay"), "links.delay", 0.0, nonneg=True)
            c = rd.number(links.get("capacity"), "links.capacity", math.inf, positive=True)
            for h in range(n_h):
                for l in range(n_h):
                    if h != l:
                        delay[h][l], capacity[h][l] = d, c
            for i, pn in enumerate(rd.seq(links.get("pairs"), "links.pairs")):
                p = rd.mapping(pn, f"links.pairs[{i}]", {"from", "to", "delay", "capacity", "symmetric"},
                               {"from", "to"})
                if p is None:
                    continue
                a = rd.string(p.get("from"), f"links.pairs[{i}].from")
                b = rd.string(p.get("to"), f"links.pairs[{i}].to")
                bad = [x for x in (a, b) if x is not None and x not in host_index]
                for x in bad:
                    rd.err(pn, f"links.pairs[{i}]", f"unknown host '{x}'")
                if a is None or b is None or bad:
                    continue
                if a == b:
                    rd.err(pn, f"links.pairs[{i}]", "a link needs two distinct hosts")
                    continue
                ha, hb = host_index[a], host_index[b]
                sym = p.get("symmetric")
                symmetric = True if sym is None else sym.value
                if not isinstance(symmetric, bool):
                    rd.err(sym, f"links.pairs[{i}].symmetric", "expected true or false")
                    symmetric = True
                pairs = [(ha, hb), (hb, ha)] if symmetric else [(ha, hb)]
                dv = rd.number(p.get("delay"), f"links.pairs[{i}].delay", None, nonneg=True)
                cv = rd.number(p.get("capacity"), f"links.pairs[{i}].capacity", None, positive=True)
                for x, y in pairs:
                    if dv is not None:
                        delay[x][y] = dv
                    if cv is not None:
                        capacity[x][y] = cv

    queues = []
    for i, vn in enumerate(rd.seq(top.get("vnfs"), "vnfs")):
        v = rd.mapping(vn, f"vnfs[{i}]", {"id", "instance_count"}, {"id"})
        if v is None:
            continue
        vid = rd.string(v.get("id"), f"vnfs[{i}].id")
        cnt_node = v.get("instance_count")
        cnt = 1
        if cnt_node is not None:
            if isinstance(cnt_node.value, bool) or not isinstance(cnt_node.value, int) or cnt_node.value < 1:
                rd.err(cnt_node, f"vnfs[{i}].instance_count", "expected a positive integer")
            else:
                cnt = cnt_node.value
        if vid is not None:
            queues.append(VnfQueue(vid, cnt))
            lines[f"vnfs[{vid}]"] = vn.line
    vnf_ids = {q.id for q in queues}

    def check_refs(table_node, table, path):
        for key in table:
            if key not in vnf_ids:
                rd.err(table_node.value[key].value if table_node is not None else None, f"{path}.{key}",
                       f"unknown VNF '{key}'")

    classes = []
    for i, cn in enumerate(rd.seq(top.get("classes"), "classes")):
        c = rd.mapping(cn, f"classes[{i}]", {"id", "qos_delay_ms", "external_rates", "entry_probabilities",
                                             "transfer"}, {"id", "qos_delay_ms", "external_rates"})
        if c is None:
            continue
        cid = rd.string(c.get("id"), f"classes[{i}].id") or f"#{i}"
        path = f"classes[{cid}]"
        lines[path] = cn.line
        qos = rd.number(c.get("qos_delay_ms"), f"{path}.qos_delay_ms", positive=True)
        ext = rd.prob_table(c.get("external_rates"), f"{path}.external_rates")
        check_refs(c.get("external_rates"), ext, f"{path}.external_rates")
        entry = None
        if c.get("entry_probabilities") is not None:
            entry = rd.prob_table(c.get("entry_probabilities"), f"{path}.entry_probabilities")
            check_refs(c.get("entry_probabilities"), entry, f"{path}.entry_probabilities")
        transfer = {}
        tn = c.get("transfer")
        if tn is not None:
            if not isinstance(tn.value, dict):
                rd.err(tn, f"{path}.transfer", "expected a mapping of VNF id to successor table")
            else:
                for src, row in tn.value.items():
                    if src not in vnf_ids:
                        rd.err(row, f"{path}.transfer.{src}", f"unknown VNF '{src}'")
                        continue
                    table = rd.prob_table(row.value, f"{path}.transfer.{src}")
                    check_refs(row.value, table, f"{path}.transfer.{src}")
                    transfer[src] = table
                    lines[f"{path}.transfer_prob[{src}]"] = row.line
        if qos is not None:
            classes.append(ServiceClass(cid, ext, transfer, qos, entry))

    margin, enforce = 1e-6, False
    if top.get("options") is not None:
        o = rd.mapping(top["options"], "options", {"stability_margin", "enforce_link_capacity"})
        if o is not None:
            margin = rd.number(o.get("stability_margin"), "options.stability_margin", margin, positive=True)
            en = o.get("enforce_link_capacity")
            if en is not None:
                if isinstance(en.value, bool):
                    enforce = en.value
                else:
                    rd.err(en, "options.enforce_link_capacity", "expected true or false")

    sweep = None
    if top.get("sweep") is not None:
        s = rd.mapping(top["sweep"], "sweep", {"parameter", "values"}, {"parameter", "values"})
        if s is not None and "parameter" in s and "values" in s:
            param = rd.string(s["parameter"], "sweep.parameter")
            if param is not None and param not in SWEEP_PARAMETERS:
                rd.err(s["parameter"], "sweep.parameter",
                       f"unknown parameter '{param}'; expected one of {', '.join(SWEEP_PARAMETERS)}")
            vals = [rd.number(v, f"sweep.values[{j}]", nonneg=True) for j, v in enumerate(rd.seq(s["values"],
                                                                                                 "sweep.values"))]
            if param in SWEEP_PARAMETERS and None not in vals:
                sweep = Sweep(param, tuple(vals)) if vals else None

    split = None
    if top.get("split") is not None:
        sn = top["split"]
        if not isinstance(sn.value, dict):
            rd.err(sn, "split", "expected a mapping of VNF id to fraction list")
        else:
            split = {}
            for vid, lst in sn.value.items():
                if vid not in vnf_ids:
                    rd.err(lst, f"split.{vid}", f"unknown VNF '{vid}'")
                    continue
                fr = [rd.number(x, f"split.{vid}[{j}]", nonneg=True) for j, x in enumerate(rd.seq(lst.value,
                                                                                               f"split.{vid}"))]
                if None not in fr:
                    split[vid] = tuple(fr)

    search = None
    if top.get("split_search") is not None:
        ss = rd.mapping(top["split_search"], "split_search", {"f0", "delta0", "epsilon"})
        if ss is not None:
            d = SplitSearchSpec()
            search = SplitSearchSpec(
                f0=rd.number(ss.get("f0"), "split_search.f0", d.f0, nonneg=True),
                delta0=rd.number(ss.get("delta0"), "split_search.delta0", d.delta0, positive=True),
                epsilon=rd.number(ss.get("epsilon"), "split_search.epsilon", d.epsilon, positive=True),
            )

    placement = None
    if top.get("placement") is not None:
        pn = top["placement"]
        if not isinstance(pn.value, dict):
            rd.err(pn, "placement", "expected a mapping of VNF id to host id")
        else:
            placement = {}
            counts = {q.id: q.instance_count for q in queues}
            known = {q.id for q in queues if q.instance_count == 1}
            known |= {replica_id(q, i) for q, n in counts.items() if n > 1 for i in range(n)}
            for vid, hn in pn.value.items():
                hid = rd.string(hn.value, f"placement.{vid}")
                if vid not in known:
                    rd.err(hn, f"placement.{vid}", f"unknown VNF instance '{vid}'")
                elif hid is not None and hid not in host_index:
                    rd.err(hn, f"placement.{vid}", f"unknown host '{hid}'")
                elif hid is not None:
                    placement[vid] = hid
            missing = sorted(known - set(pn.value))
            if missing:
                rd.err(pn, "placement", f"no host given for {', '.join(missing)}")

    sid = rd.string(top.get("id"), "id") or (Path(source).stem if source else "scenario")
    desc = top.get("description")
    recon = top.get("reconstruction")
    if rd.issues:
        raise ScenarioError(rd.issues, source)

    raw = ProblemInstance(hosts, LinkMatrix(tuple(map(tuple, delay)), tuple(map(tuple, capacity))), queues, classes,
                          stability_margin=margin, enforce_link_capacity=enforce, name=sid)
    try:
        inst = validate_instance(raw)
        if sweep is not None:
            for v in sweep.values:
                validate_instance(apply_sweep(raw, sweep.parameter, v))
    except InvalidInstance as exc:
        raise ScenarioError([ParseIssue(_line_for(i.location, lines), i.location, f"{i.kind.value}: {i.message}")
                             for i in exc.issues], source) from None
    return Scenario(id=sid, description="" if desc is None else str(desc.value), raw=raw, instance=inst,
                    sweep=sweep, split=split, split_search=search, placement=placement, source=source,
                    reconstruction=bool(recon.value) if recon is not None else False)


def _line_for(location: str, lines: dict[str, int]) -> int | None:
    # longest known prefix of the validator's location string
    best = None
    for key, line in lines.items():
        if location.startswith(key) and (best is None or len(key) > len(best[0])):
            best = (key, line)
    return best[1] if best else None


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario from a file path or a bundled corpus name."""
    p = Path(path)
    if not p.exists():
        corpus = corpus_path(str(path))
        if corpus is None:
            raise ScenarioError([ParseIssue(None, "<file>", f"no such file or corpus scenario: {path}")], str(path))
        p = corpus
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError([ParseIssue(None, "<file>", str(exc))], str(p)) from None
    return parse_scenario(text, str(p))


def _corpus_dir() -> Path:
    return Path(str(resources.files("vnfplace") / "corpus"))


def corpus_path(name: str) -> Path | None:
    p = _corpus_dir() / (name if name.endswith(".yaml") else f"{name}.yaml")
    return p if p.is_file() else None


def corpus_names() -> list[str]:
    return sorted(p.stem for p in _corpus_dir().glob("*.yaml"))
