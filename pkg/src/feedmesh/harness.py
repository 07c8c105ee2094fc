"""Experiment driver: boots a cluster, runs DDL, generators and faults, writes metrics."""
from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import os
import shutil
import statistics
import string
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any

from . import adaptors
from .adaptors import TweetGenerator
from .catalog import derive_policy
from .engine import Accounting, Engine, EngineConfig

log = logging.getLogger(__name__)

CSV_HEADER = ["window_start", "feed", "node", "inflow", "outflow", "stalled", "spilled_bytes",
              "discarded"]


class ConfigError(ValueError):
    pass


class SummaryError(ValueError):
    pass


@dataclass
class GeneratorSpec:
    count: int
    rate: float  # records per second, per generator
    duration: float  # seconds
    pull: bool = False

    @classmethod
    def parse(cls, text: str) -> "GeneratorSpec":
        """``<count>x<rate>x<duration>[:pull]``, e.g. ``4x2000x60``."""
        body, _, flag = text.strip().partition(":")
        try:
            count, rate, duration = body.lower().split("x")
            spec = cls(int(count), float(rate), float(duration), flag.strip() == "pull")
        except ValueError:
            raise ConfigError(f"bad generator spec {text!r}; expected COUNTxRATExDURATION") from None
        if spec.count <= 0 or spec.rate <= 0 or spec.duration <= 0:
            raise ConfigError(f"generator spec {text!r} must be positive")
        return spec


@dataclass
class ExperimentConfig:
    mode: str = "sim"  # sim | real
    nodes: int | list[str] = 4
    seed: int = 0
    generators: list[GeneratorSpec] = field(default_factory=list)
    ddl: str | None = None  # path to a DDL script
    ddl_text: str | None = None
    faults: str | None = None  # path to a fault script
    fault_text: str | None = None
    policy_overrides: dict[str, dict[str, str]] = field(default_factory=dict)
    metrics: str = "metrics"  # output directory
    run_name: str = "run"
    ticks: int | None = None  # run length; default covers the longest generator
    drain: bool = True
    snapshot: bool = True  # dump datasets as NDJSON under the run's work dir
    statements: dict[int, list[str]] = field(default_factory=dict)
    engine: dict[str, Any] = field(default_factory=dict)  # EngineConfig overrides

    def node_names(self) -> list[str]:
        if isinstance(self.nodes, int):
            if self.nodes <= 0:
                raise ConfigError("node count must be positive")
            if self.nodes <= 26:
                return list(string.ascii_uppercase[:self.nodes])
            return [f"N{i:02d}" for i in range(self.nodes)]
        return list(self.nodes)

    def addresses(self, ports: list[int] | None = None) -> list[str]:
        n = sum(g.count for g in self.generators)
        if ports is not None:
            return [f"127.0.0.1:{p}" for p in ports]
        return [f"gen{i}:9000" for i in range(n)]

    def script(self) -> str:
        if self.ddl_text is not None:
            return self.ddl_text
        if self.ddl is None:
            raise ConfigError("no DDL script given")
        return _read(self.ddl, "DDL script")

    def fault_script(self) -> str:
        if self.fault_text is not None:
            return self.fault_text
        if self.faults is None:
            return ""
        return _read(self.faults, "fault script")


def _read(path: str, what: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path!r}: {exc.strerror}") from None


_ENGINE_KEYS = {f for f in EngineConfig.__dataclass_fields__} - {"nodes", "seed", "mode",
                                                                   "workdir", "run_name"}


def load_config(path: str) -> ExperimentConfig:
    """Read a ``key = value`` run file (no section header needed)."""
    text = _read(path, "config")
    parser = configparser.ConfigParser(delimiters=("=",), interpolation=None,
                                       comment_prefixes=("#",), inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    cfg = ExperimentConfig()
    for key, value in parser["run"].items():
        value = value.strip()
        if key == "mode":
            if value not in ("sim", "real"):
                raise ConfigError(f"mode must be sim or real, not {value!r}")
            cfg.mode = value
        elif key == "nodes":
            cfg.nodes = int(value) if value.isdigit() else [v.strip() for v in value.split(",")]
        elif key == "seed":
            cfg.seed = int(value)
        elif key == "generators":
            cfg.generators = [GeneratorSpec.parse(v) for v in value.split(",") if v.strip()]
        elif key in ("ddl", "faults"):
            setattr(cfg, key, os.path.join(base, value))
        elif key == "metrics":
            cfg.metrics = os.path.join(base, value)
        elif key == "run":
            cfg.run_name = value
        elif key == "ticks":
            cfg.ticks = int(value)
        elif key in ("drain", "snapshot"):
            setattr(cfg, key, value.lower() in ("1", "true", "yes"))
        elif key.startswith("at."):
            try:
                tick = int(key[3:])
            except ValueError:
                raise ConfigError(f"bad timed statement key {key!r}") from None
            cfg.statements.setdefault(tick, []).append(value)
        elif key.startswith("policy."):
            name, _, pkey = key[7:].partition(".")
            if not pkey:
                raise ConfigError(f"bad policy override {key!r}; expected policy.<Name>.<key>")
            cfg.policy_overrides.setdefault(name, {})[pkey] = value
        elif key in _ENGINE_KEYS:
            kind = type(getattr(EngineConfig(nodes=[]), key))
            cfg.engine[key] = kind(float(value)) if kind in (int, float) else value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


# ------------------------------------------------------------------ running

@dataclass
class RunResult:
    config: ExperimentConfig
    engine: Engine
    csv_path: str
    summary_path: str
    summary: dict
    wall_seconds: float

    @property
    def ok(self) -> bool:
        return self.summary["identity_holds"]


def build_engine(cfg: ExperimentConfig, ports: list[int] | None = None) -> Engine:
    workdir = os.path.join(cfg.metrics, cfg.run_name + ".work")
    shutil.rmtree(workdir, ignore_errors=True)
    ecfg = EngineConfig(nodes=cfg.node_names(), seed=cfg.seed, mode=cfg.mode, workdir=workdir,
                        run_name=cfg.run_name, **cfg.engine)
    engine = Engine(ecfg)
    for name, overrides in cfg.policy_overrides.items():
        base = engine.catalog.resolve_policy(name)
        engine.catalog.policies[base.name] = derive_policy(base.name, base, overrides)
    addresses = cfg.addresses(ports)
    if cfg.mode == "sim":
        i = 0
        for spec in cfg.generators:
            for _ in range(spec.count):
                engine.add_source(addresses[i], TweetGenerator(spec.rate, spec.duration,
                                                               cfg.seed, i))
                i += 1
    text = cfg.script()
    for i, addr in enumerate(addresses):
        text = text.replace("${gen%d}" % i, addr)
    engine.load_faults(cfg.fault_script())
    engine.execute(text)
    for tick, stmts in sorted(cfg.statements.items()):
        for stmt in stmts:
            engine.at(tick, stmt)
    return engine


def _run_ticks(cfg: ExperimentConfig, tick_seconds: float) -> int:
    if cfg.ticks is not None:
        return cfg.ticks
    longest = max((g.duration for g in cfg.generators), default=0.0)
    return int(math.ceil(longest / tick_seconds))


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Execute one run and write ``<metrics>/<run>.csv`` plus a JSON summary."""
    t0 = time.perf_counter()
    servers: list[threading.Thread] = []
    stop = threading.Event()
    ports: list[int] | None = None
    gens: list[TweetGenerator] = []
    if cfg.mode == "real":
        ports, servers, gens = _start_servers(cfg, stop)
    try:
        engine = build_engine(cfg, ports)
        for addr, gen in zip(cfg.addresses(ports), gens):
            engine.count_source(addr, gen)
        ticks = _run_ticks(cfg, engine.cfg.tick_seconds)
        if cfg.mode == "sim":
            engine.run(ticks)
            if cfg.drain:
                engine.drain()
        else:
            engine.run_realtime(ticks)
            grace = int(1.0 / engine.cfg.tick_seconds)
            engine.run_realtime(grace + (-(engine.tick + grace)) % engine.cfg.window_ticks)
    finally:
        stop.set()
        for t in servers:
            t.join(timeout=2)
    wall = time.perf_counter() - t0
    os.makedirs(cfg.metrics, exist_ok=True)
    csv_path = os.path.join(cfg.metrics, f"{cfg.run_name}.csv")
    write_csv(engine, csv_path)
    summary = build_summary(engine, cfg, wall)
    if cfg.snapshot:
        data_dir = os.path.join(engine.root, "data")
        engine.storage.snapshot(data_dir)
        summary["snapshot"] = data_dir
    summary_path = os.path.join(cfg.metrics, f"{cfg.run_name}.summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return RunResult(cfg, engine, csv_path, summary_path, summary, wall)


def _start_servers(cfg: ExperimentConfig, stop: threading.Event):
    ports: list[int] = []
    threads = []
    gens = []
    i = 0
    for spec in cfg.generators:
        for _ in range(spec.count):
            gen = TweetGenerator(spec.rate, spec.duration, cfg.seed, i)
            ready = threading.Event()
            box: list[int] = []

            def on_ready(port: int, box=box, ready=ready) -> None:
                box.append(port)
                ready.set()

            t = threading.Thread(target=adaptors.serve, daemon=True,
                                 kwargs=dict(gen=gen, pull=spec.pull, ready=on_ready, stop=stop,
                                             idle_timeout=spec.duration + 10))
            t.start()
            if not ready.wait(5):
                raise RuntimeError("generator server did not start")
            ports.append(box[0])
            threads.append(t)
            gens.append(gen)
            i += 1
    return ports, threads, gens


# ------------------------------------------------------------------ output

def metric_rows(engine: Engine) -> list[list[str]]:
    secs = engine.cfg.window_ticks * engine.cfg.tick_seconds
    by_cid = {p.cid: p for p in engine.pipelines}
    out = []
    for start, who, node, vals in engine.rows:
        if isinstance(who, str):
            label = who.split(":", 1)[1]
        else:
            label = engine.label(by_cid[who])
        inflow, outflow, stalled, spilled, discarded = vals
        out.append([f"{start * engine.cfg.tick_seconds:.2f}", label, node,
                    f"{inflow / secs:.1f}", f"{outflow / secs:.1f}", str(int(stalled)),
                    str(int(spilled)), str(int(discarded))])
    return out


def write_csv(engine: Engine, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(metric_rows(engine))


def build_summary(engine: Engine, cfg: ExperimentConfig, wall: float) -> dict:
    pipes = []
    holds = True
    for p in engine.pipelines:
        acct = engine.accounting(p)
        checked = p.clean_start
        if checked and not acct.holds:
            holds = False
        pipes.append({
            "feed": p.feed, "dataset": p.dataset, "label": engine.label(p),
            "policy": p.policy.name, "state": p.state, "reason": p.reason,
            "accounting": asdict(acct), "identity_checked": checked,
            "identity_holds": acct.holds if checked else None,
            "recoveries": [{"node": r.node, "kill_tick": r.kill_tick,
                            "detect_tick": r.detect_tick, "deploy_tick": r.deploy_tick,
                            "first_insert_tick": r.first_insert_tick, "latency_ticks": r.latency}
                           for r in p.recoveries],
        })
    datasets = {name: engine.storage.count(name) for name in sorted(engine.storage.datasets)}
    return {
        "run": cfg.run_name, "mode": cfg.mode, "seed": cfg.seed, "nodes": cfg.node_names(),
        "ticks": engine.tick, "wall_seconds": round(wall, 3),
        "pipelines": pipes, "datasets": datasets, "identity_holds": holds,
        "kills": [asdict(k) for k in engine.kills],
        "fmm": {n: {"peak": node.fmm.peak, "budget": node.fmm.budget,
                    "denials": node.fmm.denials, "stall_events": node.fm.stall_events}
                for n, node in sorted(engine.nodes.items())},
        "max_allocated": engine.max_allocated,
        "escalations": len(engine.sfm.escalations),
        "errors_logged": engine.errors.count(),
        "warnings": engine.warnings,
    }


# ---------------------------------------------------------------- summarize

@dataclass
class FeedSummary:
    label: str
    total: float  # records moved to storage, from the windowed rates
    min_rate: float
    mean_rate: float
    windows: int
    dips: list[float] = field(default_factory=list)  # window starts below the dip threshold
    recoveries: list[float] = field(default_factory=list)  # seconds from dip to recovered window


@dataclass
class Summary:
    feeds: list[FeedSummary]
    recovery_latencies: list[int | None]
    identity: bool | None
    accounting: dict[str, dict]


def read_csv(path: str) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != CSV_HEADER:
                raise SummaryError(f"{path}: unexpected header {reader.fieldnames}")
            rows = []
            for n, row in enumerate(reader, 2):
                try:
                    rows.append({"window_start": float(row["window_start"]), "feed": row["feed"],
                                 "node": row["node"], "inflow": float(row["inflow"]),
                                 "outflow": float(row["outflow"]),
                                 "stalled": int(row["stalled"]),
                                 "spilled_bytes": int(row["spilled_bytes"]),
                                 "discarded": int(row["discarded"])})
                except (TypeError, ValueError, KeyError):
                    raise SummaryError(f"{path}:{n}: malformed row") from None
    except OSError as exc:
        raise SummaryError(f"cannot read {path}: {exc.strerror}") from None
    return rows


def feed_series(rows: list[dict], label: str, column: str = "outflow") -> dict[float, float]:
    """Window start → summed rate over nodes for one feed (source rows excluded)."""
    series: dict[float, float] = {}
    for r in rows:
        if r["feed"] == label and r["node"] != "source":
            series[r["window_start"]] = series.get(r["window_start"], 0.0) + r[column]
    return dict(sorted(series.items()))


def summarize(path: str, dip_fraction: float = 0.5) -> Summary:
    rows = read_csv(path)
    labels = sorted({r["feed"] for r in rows if r["node"] != "source"})
    feeds = []
    for label in labels:
        series = feed_series(rows, label)
        starts = list(series)
        window = (starts[1] - starts[0]) if len(starts) > 1 else 2.0
        nz = [t for t, v in series.items() if v > 0]
        active = [series[t] for t in starts if nz and nz[0] <= t <= nz[-1]]
        total = sum(series.values()) * window
        fs = FeedSummary(label, round(total, 1), min(active, default=0.0),
                         statistics.fmean(active) if active else 0.0, len(active))
        if active:
            steady = statistics.median(active)
            dip_at = None
            for t in starts:
                # the last active window is the partial tail of the run
                if not nz[0] <= t < nz[-1]:
                    continue
                v = series[t]
                if v < dip_fraction * steady and dip_at is None:
                    dip_at = t
                    fs.dips.append(t)
                elif v >= dip_fraction * steady and dip_at is not None:
                    fs.recoveries.append(round(t - dip_at, 2))
                    dip_at = None
        feeds.append(fs)
    latencies: list[int | None] = []
    identity = None
    accounting: dict[str, dict] = {}
    side = path[:-4] + ".summary.json" if path.endswith(".csv") else None
    if side and os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            data = json.load(fh)
        identity = data.get("identity_holds")
        for p in data.get("pipelines", []):
            key, n = p["label"], 1
            while key in accounting:  # a reconnection reuses its label
                n += 1
                key = f"{p['label']}#{n}"
            accounting[key] = p["accounting"]
            latencies.extend(r["latency_ticks"] for r in p["recoveries"])
    return Summary(feeds, latencies, identity, accounting)


def format_summary(s: Summary) -> str:
    lines = [f"{'feed':<32} {'records':>10} {'min/s':>9} {'mean/s':>9} {'windows':>7}  dips"]
    for f in s.feeds:
        dips = ",".join(f"{d:g}s" for d in f.dips) or "-"
        lines.append(f"{f.label:<32} {f.total:>10.0f} {f.min_rate:>9.1f} {f.mean_rate:>9.1f} "
                     f"{f.windows:>7}  {dips}")
    if s.accounting:
        lines.append("")
        lines.append("accounting (generated = ingested + discarded + skipped + filtered + "
                     "rejected + spilled + in-flight + lost + dropped):")
        for label, a in s.accounting.items():
            acct = Accounting(**a)
            mark = "ok" if acct.holds else "VIOLATED"
            lines.append(f"  {label}: generated={acct.generated} ingested={acct.ingested} "
                         f"discarded={acct.discarded} skipped={acct.skipped} lost={acct.lost} "
                         f"spilled={acct.spilled_pending} in_flight={acct.in_flight} "
                         f"dropped={acct.dropped} [{mark}]")
    lat = ", ".join("-" if x is None else str(x) for x in s.recovery_latencies) or "none"
    lines.append(f"recovery latencies (ticks): {lat}")
    if s.identity is not None:
        lines.append(f"accounting identity: {'holds' if s.identity else 'VIOLATED'}")
    return "\n".join(lines)


# ------------------------------------------------------------------ presets

SCALABILITY_DDL = """\
create type Tweet as open { tweetId: string, message-text: string };
create dataset Tweets(Tweet) primary key tweetId;
create feed TweetGenFeed using TweetGenAdaptor ("datasource"="${gen0}, ${gen1}, ${gen2}, ${gen3}");
create policy no_spill_policy from policy Basic set (("excess.records.spill", "false"));
connect feed TweetGenFeed to dataset Tweets using policy no_spill_policy;
"""

FAULT_DDL = """\
create type RawTweet as open { tweetId: string, message-text: string };
create type ProcessedTweet as open { tweetId: string, userId: string, referred-topics: {{string}} };
create dataset RawTweets(RawTweet) primary key tweetId on nodegroup (G, H);
create dataset ProcessedTweets(ProcessedTweet) primary key tweetId on nodegroup (E, F);
create feed TweetGenFeed using TweetGenAdaptor ("datasource"="${gen0}, ${gen1}", "locations"="A, B");
create secondary feed ProcessedTweetGenFeed from feed TweetGenFeed apply function addHashTags;
connect feed ProcessedTweetGenFeed to dataset ProcessedTweets using policy FaultTolerant;
connect feed TweetGenFeed to dataset RawTweets using policy FaultTolerant;
"""

FAULT_SCRIPT = """\
700 kill-node C
1400 kill-node A
1400 kill-node D
"""


def scalability_config(nodes: int, seed: int = 0, metrics: str = "metrics",
                       duration: float = 60.0, rate: float = 2000.0) -> ExperimentConfig:
    return ExperimentConfig(nodes=nodes, seed=seed, generators=[GeneratorSpec(4, rate, duration)],
                            ddl_text=SCALABILITY_DDL, metrics=metrics,
                            run_name=f"scalability-{nodes}",
                            engine={"node_cpu": 60.0, "node_disk": 40.0})


def fault_config(seed: int = 0, metrics: str = "metrics", faults: str | None = FAULT_SCRIPT,
                 duration: float = 30.0, run_name: str = "fault") -> ExperimentConfig:
    return ExperimentConfig(nodes=list("ABCDEFGHI"), seed=seed,
                            generators=[GeneratorSpec(2, 500.0, duration)], ddl_text=FAULT_DDL,
                            fault_text=faults or "", metrics=metrics, run_name=run_name,
                            engine={"node_cpu": 30.0, "node_disk": 17.0})


PRESETS = {"scalability": scalability_config, "fault": fault_config}


def discarded_fraction(result: RunResult) -> float:
    gen = sum(p["accounting"]["generated"] for p in result.summary["pipelines"])
    disc = sum(p["accounting"]["discarded"] for p in result.summary["pipelines"])
    return disc / gen if gen else 0.0
