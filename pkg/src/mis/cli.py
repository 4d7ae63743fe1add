"""Command line entry point: ``mis``.

Subcommands:

    mis sim run [SCENARIO] [--out DIR]       run a scenario, write CSV/JSON and figures
    mis client OP ...                        lifecycle operations on a local consortium
    mis inspect (--height H | --ident ID | --user NAME)
    mis bench [--population N --samples M]   resolve latency benchmark

The client and inspect commands work against a "sim-in-a-box": an
in-process four-node consortium whose chain and off-chain stores are kept
in a state directory and replayed on every invocation.

Exit codes: 0 success, 1 usage or configuration error, 2 safety violation,
3 not found, 4 integrity failure, 5 transaction rejected, 6 identifier
revoked or expired.
"""

from __future__ import annotations

import argparse
import base64
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from . import plotting
from .consensus import Transaction
from .crypto import hash_bytes
from .identifiers import Identifier, IdentifierError, IdentifierSpace, IdentifierType, parse_identifier
from .ledger import LedgerError
from .registry import (
    Expired,
    IdentifierRecord,
    NotFound,
    RegistryError,
    Revoked,
    UnknownUsername,
    build_request,
    extend_tx,
    identity_for_key,
    register_tx,
    revoke_tx,
    transfer_tx,
    update_tx,
)
from .resolution import (
    DigestMismatch,
    DnsStub,
    DomainResolver,
    IntegrityFailure,
    MetadataStore,
    MetadataUnavailable,
    Mode,
    NxDomain,
    ResolutionError,
    ResolverClients,
    ResourceRef,
    ResourceUnavailable,
    StorageServer,
    inter_translate,
    publish,
    resolve,
)
from .simnet import ConfigInvalid, SafetyViolation, Scenario, bundled_scenario, load_scenario, run
from .simnet.bench import measure_resolve
from .simnet.cluster import ChainFileError, Cluster, TxOutcome
from .simnet.config import LatencyModel

EXIT_OK, EXIT_USAGE, EXIT_SAFETY, EXIT_NOT_FOUND, EXIT_INTEGRITY, EXIT_REJECTED, EXIT_LAPSED = range(7)

PULL_TYPES = (IdentifierType.CONTENT, IdentifierType.SERVICE)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is reserved
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- output -------------------------------------------------------------------


def emit(obj: Any, fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    elif fmt == "csv":
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("key", "value"))
        for key, value in _flatten(obj):
            w.writerow((key, value))
    else:
        for key, value in _flatten(obj):
            out.write(f"{key}: {value}\n")


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        items = []
        for k in sorted(obj):
            items += _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
        return items
    if isinstance(obj, list) and obj and all(isinstance(x, (dict, list)) for x in obj):
        items = []
        for i, x in enumerate(obj):
            items += _flatten(x, f"{prefix}[{i}]")
        return items
    if isinstance(obj, list):
        return [(prefix, " ".join(str(x) for x in obj))]
    return [(prefix, obj)]


def _fail(code: int, message: str) -> int:
    sys.stderr.write(f"mis: {message}\n")
    return code


# -- sim ------------------------------------------------------------------------


def _scenario_path(arg: str | None, config: str | None) -> Path:
    ref = arg or config or os.environ.get("MIS_CONFIG")
    if not ref:
        raise UsageError("no scenario given (argument, --config or MIS_CONFIG)")
    path = Path(ref)
    if path.exists():
        return path
    return bundled_scenario(ref if ref.endswith(".json") else f"{ref}.json")


def cmd_sim_run(args) -> int:
    scenario = load_scenario(_scenario_path(args.scenario, args.config))
    cfg = scenario.config
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.rounds is not None:
        cfg = replace(cfg, rounds=args.rounds, duration_s=None)
    scenario = replace(scenario, config=cfg)
    out = Path(args.out) if args.out else None
    if scenario.sweep:
        return _sweep(scenario, args, out)
    result = run(cfg, scenario.faults)
    report = result.report
    report.extra["final_states"] = result.final_states()
    if out is not None:
        paths = report.write(out, "metrics")
        if not args.no_plots:
            paths["phases"] = plotting.phase_breakdown(report, out / "phases.png", cfg.name)
            if report.resolve_ms:
                paths["resolve"] = plotting.resolve_histogram(report.resolve_ms, out / "resolve.png")
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    elif args.format == "json":
        sys.stdout.write(report.summary_json())
    else:
        summary = report.summary()
        summary.pop("final_states", None)
        emit(summary, "text")
    return EXIT_OK


def _sweep(scenario: Scenario, args, out: Path | None) -> int:
    sizes = scenario.sweep
    means, summaries = {}, {}
    for n in sizes:
        cfg = scenario.sized(n)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.rounds is not None:
            cfg = replace(cfg, rounds=args.rounds, duration_s=None)
        result = run(cfg)
        summaries[n] = result.report.summary()
        means[n] = result.report.phase_means()
        if out is not None:
            result.report.write(out, f"metrics-{n}")
    doc = {"scenario": scenario.config.name,
           "sizes": {str(n): {"phase_means": means[n],
                              "consensus_share": summaries[n]["consensus_share"],
                              "blocks": summaries[n]["blocks"]} for n in sizes}}
    if out is not None:
        (out / "sweep.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        if not args.no_plots:
            plotting.sweep_plot(means, out / "sweep.png", scenario.config.name)
    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(("nodes", "propose_ms", "vote_ms", "commit_ms", "storage_ms", "total_ms"))
        for n in sizes:
            m = means[n]
            w.writerow((n, m["propose_ms"], m["vote_ms"], m["commit_ms"], m["storage_ms"],
                        m["total_ms"]))
    else:
        emit(doc, args.format)
    return EXIT_OK


# -- sim-in-a-box -------------------------------------------------------------------

_BOX_KEYS = {"state_dir", "nodes", "seed", "zone"}


class Box:
    """An in-process consortium plus its metadata and storage servers, kept on disk."""

    def __init__(self, state_dir: Path, nodes: int = 4, seed: int = 0,
                 zone: str | None = None) -> None:
        self.dir = state_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        chain = self.dir / "chain.bin"
        if chain.exists():
            self.cluster = Cluster.load_chain(chain)
        else:
            self.cluster = Cluster(n=nodes, seed=seed)
        self.metadata = MetadataStore("M")
        skey = self.cluster.user_key("storage-operator")
        self.server = StorageServer(identity_for_key(skey.public),
                                    Identifier(IdentifierType.IPV4, "192.0.2.1"))
        zone_text = Path(zone).read_text() if zone else bundled_scenario("legacy.zone").read_text()
        self.stub = DnsStub.from_zone(zone_text)
        self.domains = DomainResolver(self.cluster.registry,
                                      [u for u, _, _ in self.cluster.dns_users],
                                      self.stub, [self.metadata])
        self._load_stores()

    @property
    def now(self) -> float:
        return self.cluster.clock

    def clients(self) -> ResolverClients:
        return ResolverClients(self.cluster.registry, [self.metadata], [self.server], self.now)

    def _load_stores(self) -> None:
        path = self.dir / "stores.json"
        if not path.exists():
            return
        doc = json.loads(path.read_text())
        for addr, raw in doc["metadata"].items():
            self.metadata.files[bytes.fromhex(addr)] = raw.encode()
        for key, blob in doc["storage"].items():
            self.server.blobs[key] = base64.b64decode(blob)
        for user, entries in doc["dns_overlay"].items():
            self.domains.overlay[user] = {k: IdentifierRecord.from_json(v) for k, v in entries.items()}

    def save(self) -> None:
        self.cluster.save_chain(self.dir / "chain.bin")
        doc = {
            "metadata": {a.hex(): raw.decode() for a, raw in sorted(self.metadata.files.items())},
            "storage": {k: base64.b64encode(v).decode() for k, v in sorted(self.server.blobs.items())},
            "dns_overlay": {u: {k: r.to_json() for k, r in sorted(e.items())}
                            for u, e in self.domains.overlay.items()},
        }
        (self.dir / "stores.json").write_text(json.dumps(doc, sort_keys=True, indent=1))

    def execute(self, tx: Transaction) -> TxOutcome:
        return self.cluster.execute(tx)[0]

    def publish(self, username: str, ident: Identifier, resource: bytes) -> bytes:
        if ident.itype in PULL_TYPES:
            ref = ResourceRef(self.server.identity, ident, Mode.PULL)
        else:
            ref = ResourceRef(self.server.identity, self.server.address, Mode.PUSH)
        return publish(username, ident, resource, [ref], self.clients())


def _box_settings(args) -> dict:
    settings: dict[str, Any] = {}
    cfg = args.config or os.environ.get("MIS_CONFIG")
    if cfg:
        try:
            doc = json.loads(Path(cfg).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read client config {cfg}: {exc}") from exc
        if not isinstance(doc, dict) or set(doc) - _BOX_KEYS:
            raise ConfigInvalid(f"client config keys must be among {sorted(_BOX_KEYS)}")
        settings.update(doc)
    if args.state:
        settings["state_dir"] = args.state
    if args.seed is not None:
        settings["seed"] = args.seed
    if getattr(args, "zone", None):
        settings["zone"] = args.zone
    return settings


def open_box(args) -> Box:
    s = _box_settings(args)
    return Box(Path(s.get("state_dir", "mis-state")), int(s.get("nodes", 4)), int(s.get("seed", 0)),
               s.get("zone"))


def _resource(args) -> bytes | None:
    if getattr(args, "resource_file", None):
        return Path(args.resource_file).read_bytes()
    if getattr(args, "resource", None) is not None:
        return args.resource.encode()
    return None


def _outcome_code(outcome: TxOutcome) -> int:
    if outcome.status == "committed":
        return EXIT_OK
    if outcome.reason in ("revoked", "expired"):
        return EXIT_LAPSED
    if outcome.reason == "not-found":
        return EXIT_NOT_FOUND
    return EXIT_REJECTED


def _outcome_doc(op: str, outcome: TxOutcome, **extra) -> dict:
    doc = {"op": op, "tx_id": outcome.tx_id.hex(), "status": outcome.status,
           "reason": outcome.reason, "height": outcome.height}
    doc.update(extra)
    return doc


def cmd_client(args) -> int:
    box = open_box(args)
    handler = _CLIENT_OPS[args.op]
    code = handler(box, args)
    box.save()
    return code


def _client_register(box: Box, args) -> int:
    key = box.cluster.user_key(args.user)
    ident = parse_identifier(args.ident) if args.ident else identity_for_key(key.public)
    resource = _resource(args)
    digest = hash_bytes(resource) if resource is not None else None
    req = build_request(args.user, ident, key, args.ttl, args.fee, box.now, digest, args.about_me)
    outcome = box.execute(register_tx(req, key))
    doc = _outcome_doc("register", outcome, identifier=str(ident))
    if outcome.status == "committed":
        rec = box.cluster.registry.lookup(ident, box.now)
        if resource is not None:
            box.publish(args.user, ident, resource)
        doc["record"] = rec.to_json()
    emit(doc, args.format)
    return _outcome_code(outcome)


def _client_update(box: Box, args) -> int:
    key = box.cluster.user_key(args.user)
    ident = parse_identifier(args.ident)
    resource = _resource(args)
    digest = hash_bytes(resource) if resource is not None else (
        bytes.fromhex(args.digest) if args.digest else None)
    outcome = box.execute(update_tx(ident, digest, key, box.now, args.fee))
    if outcome.status == "committed" and resource is not None:
        box.publish(args.user, ident, resource)
    emit(_outcome_doc("update", outcome, identifier=str(ident)), args.format)
    return _outcome_code(outcome)


def _client_revoke(box: Box, args) -> int:
    key = box.cluster.user_key(args.user)
    ident = parse_identifier(args.ident)
    outcome = box.execute(revoke_tx(ident, key, box.now, args.fee))
    emit(_outcome_doc("revoke", outcome, identifier=str(ident)), args.format)
    return _outcome_code(outcome)


def _client_extend(box: Box, args) -> int:
    key = box.cluster.user_key(args.user)
    ident = parse_identifier(args.ident)
    outcome = box.execute(extend_tx(ident, args.delta, key, box.now, args.fee))
    emit(_outcome_doc("extend", outcome, identifier=str(ident)), args.format)
    return _outcome_code(outcome)


def _client_transfer(box: Box, args) -> int:
    key = box.cluster.user_key(args.user)
    ident = parse_identifier(args.ident)
    recipient = box.cluster.user_key(args.to)
    outcome = box.execute(transfer_tx(ident, args.to, recipient.public, key, box.now, args.fee))
    emit(_outcome_doc("transfer", outcome, identifier=str(ident), recipient=args.to), args.format)
    return _outcome_code(outcome)


def _client_resolve(box: Box, args) -> int:
    ident = parse_identifier(args.ident)
    clients = box.clients()
    reg = box.cluster.registry
    if ident.itype == IdentifierType.DOMAIN and str(ident) not in reg.state.index:
        res = box.domains.resolve_domain(ident.name, box.now)
        doc = {"identifier": str(ident), "record": res.record.to_json(),
               "metadata": json.loads(res.metadata.to_json()), "cached": res.cached,
               "addresses": res.resource.decode().split("\n")}
        emit(doc, args.format)
        return EXIT_OK
    rec = clients.lookup(ident)
    doc: dict[str, Any] = {"identifier": str(ident), "record": rec.to_json(), "metadata": None}
    if box.metadata.peek(rec.metadata_addr) is not None:
        res = resolve(ident, clients)
        doc["metadata"] = json.loads(res.metadata.to_json())
        doc["attempts"] = res.attempts
        doc["resource_sha256"] = hash_bytes(res.resource).hex()
        try:
            doc["resource"] = res.resource.decode()
        except UnicodeDecodeError:
            pass
    emit(doc, args.format)
    return EXIT_OK


def _client_translate(box: Box, args) -> int:
    ident = parse_identifier(args.ident)
    types = frozenset(int(t) for t in args.space.split(","))
    space = IdentifierSpace(types | {int(IdentifierType.IDENTITY)}, frozenset())
    res = inter_translate(ident, space, box.clients(), box.domains)
    doc = {"source": str(res.source), "username": res.username, "mode": res.mode.value,
           "requester_space": space.label,
           "chain": [{"identifier": str(i), "space": label} for i, label in res.chain]}
    emit(doc, args.format)
    return EXIT_OK


_CLIENT_OPS = {
    "register": _client_register,
    "update": _client_update,
    "revoke": _client_revoke,
    "extend": _client_extend,
    "transfer": _client_transfer,
    "resolve": _client_resolve,
    "translate": _client_translate,
}


# -- inspect / bench ----------------------------------------------------------------


def cmd_inspect(args) -> int:
    box = open_box(args)
    cluster = box.cluster
    if args.height is not None:
        h = args.height
        if not 0 <= h <= cluster.height:
            raise NotFound(f"no block at height {h} (chain height {cluster.height})")
        block = cluster.blocks[h]
        hdr = block.header
        doc = {
            "height": hdr.height,
            "hash": hdr.hash.hex(),
            "prev_hash": hdr.prev_hash.hex(),
            "timestamp": hdr.timestamp,
            "vote_result": list(hdr.vote_result),
            "signers": len(hdr.voters_agg_sig.signers),
            "tx_count": sum(len(tl.txs) for tl in block.bodies),
            "storage": {k: v for k, v in cluster.ledgers[0].holders(h).items() if k != "height"},
        }
        emit(doc, args.format)
        return EXIT_OK
    if args.ident:
        rec = cluster.registry.state.index.get(str(parse_identifier(args.ident)))
        if rec is None:
            raise NotFound(f"{args.ident} is not registered")
        doc = rec.to_json()
        doc["effective_status"] = rec.effective_status(box.now).value
        emit(doc, args.format)
        return EXIT_OK
    records = cluster.registry.lookup_username(args.user)
    emit({"username": args.user, "identifiers": [r.to_json() for r in records]}, args.format)
    return EXIT_OK


def cmd_bench(args) -> int:
    latency = LatencyModel.zero() if args.zero_latency else LatencyModel()
    stats = measure_resolve(args.population, args.samples, latency=latency,
                            seed=args.seed or 0, expired=args.expired)
    summary = stats.summary()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sample", "resolve_ms"))
        for i, v in enumerate(stats.samples):
            w.writerow((i, f"{v:.3f}"))
        (out / "resolve.csv").write_text(buf.getvalue())
        (out / "resolve.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        if not args.no_plots:
            plotting.resolve_histogram(stats.samples, out / "resolve.png")
    emit(summary, args.format)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="scenario or client config file (default: $MIS_CONFIG)")
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=("json", "csv", "text"), default="text")
    common.add_argument("--out", help="output directory")

    box = _Parser(add_help=False)
    box.add_argument("--state", help="sim-in-a-box state directory (default ./mis-state)")
    box.add_argument("--zone", help="DNS zone file for legacy names")

    p = _Parser(prog="mis", description="Multi-identifier registry tools")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("sim", help="simulation")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True, parser_class=_Parser)
    sim_run = sim_sub.add_parser("run", parents=[common], help="run a scenario")
    sim_run.add_argument("scenario", nargs="?", help="scenario file or bundled scenario name")
    sim_run.add_argument("--rounds", type=int)
    sim_run.add_argument("--no-plots", action="store_true")
    sim_run.set_defaults(func=cmd_sim_run)

    client = sub.add_parser("client", help="identifier lifecycle operations")
    ops = client.add_subparsers(dest="op", required=True, parser_class=_Parser)
    for name in ("register", "update", "revoke", "extend", "transfer"):
        op = ops.add_parser(name, parents=[common, box])
        op.add_argument("--user", required=True)
        op.add_argument("--fee", type=float, default=0.0)
        if name == "register":
            op.add_argument("--ident", help="identifier to register (default: the user's identity)")
            op.add_argument("--ttl", type=int, default=365 * 86400)
            op.add_argument("--about-me")
        else:
            op.add_argument("ident")
        if name in ("register", "update"):
            op.add_argument("--resource", help="resource content to publish")
            op.add_argument("--resource-file")
        if name == "update":
            op.add_argument("--digest", help="new resource digest (hex)")
        if name == "extend":
            op.add_argument("--delta", type=int, required=True, help="seconds to add")
        if name == "transfer":
            op.add_argument("--to", required=True, help="recipient username")
        op.set_defaults(func=cmd_client)
    res = ops.add_parser("resolve", parents=[common, box])
    res.add_argument("ident")
    res.set_defaults(func=cmd_client)
    tr = ops.add_parser("translate", parents=[common, box])
    tr.add_argument("ident")
    tr.add_argument("--space", default="0", help="requester's identifier types, e.g. 0,5,6")
    tr.set_defaults(func=cmd_client)

    insp = sub.add_parser("inspect", parents=[common, box], help="show a block, record or user")
    which = insp.add_mutually_exclusive_group(required=True)
    which.add_argument("--height", type=int)
    which.add_argument("--ident")
    which.add_argument("--user")
    insp.set_defaults(func=cmd_inspect)

    bench = sub.add_parser("bench", parents=[common], help="resolve latency benchmark")
    bench.add_argument("--population", type=int, default=20_000)
    bench.add_argument("--samples", type=int, default=2_000)
    bench.add_argument("--expired", type=int, default=0)
    bench.add_argument("--zero-latency", action="store_true")
    bench.add_argument("--no-plots", action="store_true")
    bench.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SafetyViolation as exc:
        return _fail(EXIT_SAFETY, f"safety violation: {exc}")
    except (UsageError, ConfigInvalid, ChainFileError, IdentifierError, OSError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (Revoked, Expired) as exc:
        return _fail(EXIT_LAPSED, str(exc))
    except (NotFound, UnknownUsername, NxDomain, MetadataUnavailable, ResourceUnavailable) as exc:
        return _fail(EXIT_NOT_FOUND, str(exc))
    except (IntegrityFailure, DigestMismatch) as exc:
        return _fail(EXIT_INTEGRITY, str(exc))
    except (RegistryError, ResolutionError, LedgerError) as exc:
        return _fail(EXIT_REJECTED, str(exc))


if __name__ == "__main__":
    sys.exit(main())
