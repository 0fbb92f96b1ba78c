"""Command line entry point for mail users and for provider operators.

Exit codes: 0 success, 1 operational error, 64 usage error. ``provider-run``
additionally exits 2 on a bad config and 3 when it cannot bind.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from pathlib import Path

from . import __version__, keystore, simnet, wire
from .client import (ClientState, ContactEntry, OutgoingMail, TcpTransport,
                     default_state_dir, state_lock)
from .errors import SafeMailError
from .keystore import Address

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_BIND, EXIT_USAGE = 0, 1, 2, 3, 64


# Keys of the single JSON object each command prints under --json. Bytes are
# lowercase hex, addresses are ``local@domain``. Errors print {"error", "detail"}.
JSON_SCHEMAS = {
    "keygen": {"created", "idempotent", "major_public", "minor_public"},
    "enroll": {"address", "provider", "idempotent"},
    "whoami": {"label", "minor_public", "endpoint", "address", "idempotent"},
    "contacts": {"contacts", "idempotent"},
    "contacts add": {"added", "idempotent"},
    "contacts remove": {"removed", "idempotent"},
    "authorize": {"authorized", "idempotent"},
    "revoke": {"revoked", "idempotent"},
    "send": {"status", "extraction_code", "deposit_id", "note_id", "idempotent"},
    "inbox": {"notes", "idempotent"},
    "fetch": {"mails", "alerts", "idempotent"},
    "sim-run": {"csv", "summary", "spam_delivered", "combined_reduction",
                "storage_reduction", "idempotent"},
    "error": {"error", "detail"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _emit(args, data: dict, text: str) -> None:
    if args.json:
        print(json.dumps(wire.to_jsonable(data), sort_keys=True))
    else:
        print(text)


def _state(args) -> Path:
    return Path(args.state_dir) if args.state_dir else default_state_dir()


def _client(args, state: ClientState):
    return state.client(TcpTransport(timeout=args.timeout))


def cmd_keygen(args) -> int:
    root = _state(args)
    with state_lock(root):
        state = ClientState.load(root)
        if state.keys is not None and not args.force:
            keys, created = state.keys, False
        else:
            if args.force and (root / "keys").exists():
                (root / "keys").unlink()
            keys, created = keystore.generate_keypair_set(), True
            state.keys = keys
            state.save()
    _emit(args, {"created": created, "idempotent": True,
                 "major_public": keys.major.public_key, "minor_public": keys.minor.public_key},
          f"{'generated' if created else 'existing'} keys\n"
          f"major {keys.major.public_key.hex()}\nminor {keys.minor.public_key.hex()}")
    return EXIT_OK


def cmd_enroll(args) -> int:
    root = _state(args)
    with state_lock(root):
        state = ClientState.load(root)
        client = _client(args, state)
        address = client.enroll(args.provider)
        state.adopt(client)
        state.save()
    _emit(args, {"address": address, "provider": args.provider, "idempotent": False},
          str(address))
    return EXIT_OK


def cmd_whoami(args) -> int:
    state = ClientState.load(_state(args))
    if state.keys is None:
        raise UsageError("no keys; run keygen first")
    line = "\t".join([args.label, state.keys.minor.public_key.hex(), state.home or "-",
                      str(state.address or "-")])
    _emit(args, {"label": args.label, "minor_public": state.keys.minor.public_key,
                 "endpoint": state.home, "address": state.address, "idempotent": True}, line)
    return EXIT_OK


def cmd_contacts(args) -> int:
    root = _state(args)
    with state_lock(root):
        state = ClientState.load(root)
        if args.action == "add":
            if not args.rest or len(args.rest) not in (3, 4):
                raise UsageError("contacts add LABEL HEXPUBKEY ENDPOINT [ADDRESS]")
            label, pub, endpoint = args.rest[:3]
            address = Address.parse(args.rest[3]) if len(args.rest) == 4 else None
            try:
                entry = ContactEntry(label, bytes.fromhex(pub), endpoint, address)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            state.contacts.add(entry)
            state.save()
            _emit(args, {"added": entry, "idempotent": True}, f"added {label}")
        elif args.action == "remove":
            if len(args.rest) != 1:
                raise UsageError("contacts remove LABEL")
            try:
                state.contacts.remove(args.rest[0])
            except KeyError:
                raise UsageError(f"no contact {args.rest[0]!r}") from None
            state.save()
            _emit(args, {"removed": args.rest[0], "idempotent": True}, f"removed {args.rest[0]}")
        else:
            entries = list(state.contacts)
            _emit(args, {"contacts": entries, "idempotent": True},
                  state.contacts.dumps().rstrip("\n") or "(no contacts)")
    return EXIT_OK


def _contact(state: ClientState, label: str) -> ContactEntry:
    entry = state.contacts.get(label)
    if entry is None:
        raise UsageError(f"no contact {label!r}")
    return entry


def cmd_authorize(args) -> int:
    state = ClientState.load(_state(args))
    _client(args, state).authorize(_contact(state, args.label))
    _emit(args, {"authorized": args.label, "idempotent": True}, f"authorized {args.label}")
    return EXIT_OK


def cmd_revoke(args) -> int:
    state = ClientState.load(_state(args))
    _client(args, state).revoke(_contact(state, args.label))
    _emit(args, {"revoked": args.label, "idempotent": False}, f"revoked {args.label}")
    return EXIT_OK


def cmd_send(args) -> int:
    state = ClientState.load(_state(args))
    if args.body_file:
        body = Path(args.body_file).read_bytes()
    else:
        body = (args.body or "").encode()
    result = _client(args, state).send(OutgoingMail(_contact(state, args.to), body))
    _emit(args, {"status": result.status, "extraction_code": result.extraction_code,
                 "deposit_id": result.deposit_id, "note_id": result.note_id,
                 "idempotent": False},
          f"{result.status} (code {result.extraction_code}; not idempotent: "
          f"re-running sends another copy)")
    return EXIT_OK


def cmd_inbox(args) -> int:
    state = ClientState.load(_state(args))
    notes = _client(args, state).list_notes()
    rows = []
    for n in notes:
        contact = state.contacts.by_pubkey(n.sender_minor_pubkey)
        rows.append({"note_id": n.note_id, "from": contact.label if contact else None,
                     "from_pubkey": n.sender_minor_pubkey, "posted_at": n.posted_at,
                     "depot_hint": n.depot_hint})
    text = "\n".join(f"{r['note_id'].hex()}  {r['from'] or r['from_pubkey'].hex()[:16]}  "
                     f"{r['posted_at']}" for r in rows) or "(inbox empty)"
    _emit(args, {"notes": rows, "idempotent": True}, text)
    return EXIT_OK


def cmd_fetch(args) -> int:
    root = _state(args)
    with state_lock(root):
        state = ClientState.load(root)
        client = _client(args, state)
        mails = client.fetch_all()
        paths = [state.cache_mail(m) for m in mails]
    rows = [{"note_id": m.note_id, "from": m.from_label, "from_pubkey": m.from_pubkey,
             "verified": m.verified, "bytes": len(m.body), "path": str(p)}
            for m, p in zip(mails, paths)]
    alerts = [{"kind": a.kind, "note_id": a.note_id, "detail": a.detail} for a in client.alerts]
    lines = [f"{r['from'] or r['from_pubkey'].hex()[:16]}"
             f"{'' if r['verified'] else ' (unverified sender)'}: {r['bytes']} bytes -> {r['path']}"
             for r in rows]
    lines += [f"warning: {a['kind']} {a['note_id'].hex()} {a['detail']}" for a in alerts]
    _emit(args, {"mails": rows, "alerts": alerts, "idempotent": False},
          "\n".join(lines) or "(nothing to fetch)")
    return EXIT_ERROR if any(a.kind == "tamper" for a in client.alerts) else EXIT_OK


def cmd_provider_run(args) -> int:
    from .provider import ConfigError, Provider, ProviderConfig
    from .server import ProviderServer, start_debug_server
    from .client import parse_endpoint
    try:
        config = ProviderConfig.from_file(args.config)
        host, port = parse_endpoint(config.listen)
        provider = Provider(config)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        server = ProviderServer(provider, (host, port))
        debug = start_debug_server(provider, host, config.debug_port) if config.debug_port else None
    except OSError as exc:
        print(f"cannot bind {config.listen}: {exc}", file=sys.stderr)
        return EXIT_BIND

    def stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    print(f"serving {config.domain} on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        if debug is not None:
            debug.shutdown()
    return EXIT_OK


def cmd_sim_run(args) -> int:
    try:
        scenario = simnet.load_scenario(args.scenario)
    except (OSError, simnet.ScenarioError) as exc:
        raise UsageError(f"bad scenario: {exc}") from exc
    report = simnet.run_scenario(scenario, tcp=args.tcp)
    csv_text = report.to_csv()
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.json:
        data = {"csv": csv_text, "summary": report.summary(), "idempotent": True,
                "spam_delivered": report.spam_delivered,
                "combined_reduction": report.combined_reduction,
                "storage_reduction": report.storage_reduction}
        print(json.dumps(data, sort_keys=True))
    else:
        print(csv_text if not args.csv else "", end="")
        print(report.summary(), end="", file=sys.stderr if not args.csv else sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    epilog = "JSON output keys per command:\n" + "\n".join(
        f"  {name}: {', '.join(sorted(keys))}" for name, keys in JSON_SCHEMAS.items())
    p = _Parser(prog="safemail", description=__doc__.splitlines()[0], epilog=epilog,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--state-dir", help="client state dir (default $SAFEMAIL_STATE_DIR "
                                       "or ~/.safemail)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--timeout", type=float, default=30.0, help="network timeout, seconds")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("keygen", help="create the major/minor key pairs")
    s.add_argument("--force", action="store_true", help="replace existing keys")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("enroll", help="register the major key with a provider")
    s.add_argument("--provider", required=True, metavar="HOST:PORT")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("whoami", help="print the contacts line to hand to correspondents")
    s.add_argument("--label", default="me")
    s.set_defaults(func=cmd_whoami)

    s = sub.add_parser("contacts", help="manage the contact book",
                       description="contacts list | contacts add LABEL HEXPUBKEY "
                                   "ENDPOINT [ADDRESS] | contacts remove LABEL")
    s.add_argument("action", choices=["list", "add", "remove"], nargs="?", default="list")
    s.add_argument("rest", nargs="*")
    s.set_defaults(func=cmd_contacts)

    s = sub.add_parser("authorize", help="allow a contact to leave notes in the inbox")
    s.add_argument("label")
    s.set_defaults(func=cmd_authorize)

    s = sub.add_parser("revoke", help="withdraw a contact's authorization")
    s.add_argument("label")
    s.set_defaults(func=cmd_revoke)

    s = sub.add_parser("send", help="deposit a mail and notify the recipient")
    s.add_argument("--to", required=True, metavar="LABEL")
    body = s.add_mutually_exclusive_group(required=True)
    body.add_argument("--body-file")
    body.add_argument("--body")
    s.set_defaults(func=cmd_send)

    s = sub.add_parser("inbox", help="list pending notes")
    s.set_defaults(func=cmd_inbox)

    s = sub.add_parser("fetch", help="pick up every pending mail")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("provider-run", help="run a provider daemon")
    s.add_argument("--config", required=True, help="flat key = value provider config")
    s.set_defaults(func=cmd_provider_run)

    s = sub.add_parser("sim-run", help="run a simulation scenario, print CSV")
    s.add_argument("scenario")
    s.add_argument("--csv", help="write the CSV here instead of stdout")
    s.add_argument("--tcp", action="store_true", help="use real sockets")
    s.set_defaults(func=cmd_sim_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"safemail: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SafeMailError, keystore.InvalidKey, wire.WireError, OSError, ValueError) as exc:
        if args.json:
            print(json.dumps({"error": getattr(exc, "code", type(exc).__name__),
                              "detail": str(exc)}, sort_keys=True))
        else:
            print(f"safemail: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
