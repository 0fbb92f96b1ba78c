"""Deterministic multi-provider simulation with byte accounting and adversaries.

Providers run in-process behind a loopback transport that frames every
request and response exactly as the TCP transport does, so the per-link byte
counters equal what would cross a real socket. With ``tcp=True`` the same
scenario runs over real sockets instead.

Scenario text format, one directive per line, ``#`` starts a comment::

    seed 7
    providers 2
    silent_drop 0
    user alice 0                  # name, provider index
    user bob 1
    grant alice bob               # alice lets bob leave notes
    at 1 bob send alice 10240     # tick, actor, verb, args
    at 2 alice fetch
    at 3 alice revoke bob
    at 4 alice authorize bob
    at 5 * expire
    attack UNAUTHORIZED_NOTE 1000 alice   # kind, count, target user or *
"""

from __future__ import annotations

import csv
import io
import random
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

from . import keystore, wire
from .client import Client, ContactEntry, OutgoingMail, TcpTransport
from .errors import ProviderError, TransportError
from .keystore import SeededEntropy
from .provider import Provider, ProviderConfig, iter_data_files
from .wire import Kind, Status

ATTACK_KINDS = ("UNAUTHORIZED_NOTE", "FORGED_GRANT", "TAMPERED_NOTE",
                "PICKUP_REPLAY", "CODE_PROBE")
VERBS = {"send": 2, "fetch": 0, "authorize": 1, "revoke": 1, "expire": 0}
ADVERSARY = "adversary"
EPOCH = 1_700_000_000
# bodies shorter than this are skipped by substring leak scans (false positives)
MIN_SCAN_BYTES = 16


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    tick: int
    actor: str
    verb: str
    args: tuple = ()


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    count: int
    target: str = "*"


@dataclass
class Scenario:
    seed: int
    providers: int
    users: dict = field(default_factory=dict)
    grant_graph: list = field(default_factory=list)
    schedule: list = field(default_factory=list)
    adversaries: list = field(default_factory=list)
    silent_drop: bool = False

    def validate(self) -> None:
        if not 0 <= self.seed < 2 ** 64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        if self.providers < 1:
            raise ScenarioError("need at least one provider")
        for name, idx in self.users.items():
            if name in (ADVERSARY, "*"):
                raise ScenarioError(f"reserved user name {name!r}")
            if not 0 <= idx < self.providers:
                raise ScenarioError(f"user {name} assigned to unknown provider {idx}")
        for owner, sender in self.grant_graph:
            if owner not in self.users or sender not in self.users:
                raise ScenarioError(f"grant {owner}->{sender} names an undeclared user")
        for a in self.schedule:
            if a.verb not in VERBS:
                raise ScenarioError(f"unknown verb {a.verb!r}")
            if len(a.args) != VERBS[a.verb]:
                raise ScenarioError(f"{a.verb} takes {VERBS[a.verb]} arguments")
            if a.verb == "expire":
                continue
            if a.actor not in self.users:
                raise ScenarioError(f"schedule references undeclared actor {a.actor!r}")
            if a.verb in ("send", "authorize", "revoke") and a.args[0] not in self.users:
                raise ScenarioError(f"schedule references undeclared user {a.args[0]!r}")
        for spec in self.adversaries:
            if spec.kind not in ATTACK_KINDS:
                raise ScenarioError(f"unknown attack {spec.kind!r}")
            if spec.count < 0:
                raise ScenarioError("attack count must be >= 0")
            if spec.target != "*" and spec.target not in self.users:
                raise ScenarioError(f"attack target {spec.target!r} undeclared")


def parse_scenario(text: str) -> Scenario:
    s = Scenario(seed=0, providers=1)
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        head, rest = parts[0], parts[1:]
        try:
            if head == "seed":
                s.seed = int(rest[0])
            elif head == "providers":
                s.providers = int(rest[0])
            elif head == "silent_drop":
                s.silent_drop = rest[0] not in ("0", "false", "no")
            elif head == "user":
                s.users[rest[0]] = int(rest[1])
            elif head == "grant":
                s.grant_graph.append((rest[0], rest[1]))
            elif head == "at":
                args = tuple(int(a) if a.isdigit() else a for a in rest[3:])
                s.schedule.append(Action(int(rest[0]), rest[1], rest[2], args))
            elif head == "attack":
                target = rest[2] if len(rest) > 2 else "*"
                s.adversaries.append(AttackSpec(rest[0], int(rest[1]), target))
            else:
                raise ScenarioError(f"line {lineno}: unknown directive {head!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"line {lineno}: {exc}") from exc
    s.validate()
    return s


def format_scenario(s: Scenario) -> str:
    lines = [f"seed {s.seed}", f"providers {s.providers}",
             f"silent_drop {int(s.silent_drop)}"]
    lines += [f"user {u} {p}" for u, p in s.users.items()]
    lines += [f"grant {o} {r}" for o, r in s.grant_graph]
    lines += [" ".join(["at", str(a.tick), a.actor, a.verb, *map(str, a.args)])
              for a in s.schedule]
    lines += [f"attack {a.kind} {a.count} {a.target}" for a in s.adversaries]
    return "\n".join(lines) + "\n"


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def random_scenario(seed: int, providers: int = 5, users: int = 20, grants: int = 50,
                    sends: int = 500, unauthorized: int = 1000, forged_grants: int = 100,
                    tampered: int = 0, replays: int = 0, probes: int = 0,
                    body_sizes: tuple = (64, 4096), fetch_every: int = 50) -> Scenario:
    """A random federation: users spread round-robin over providers, random
    grant edges, sends only along granted edges, periodic fetches."""
    rng = random.Random(seed)
    names = [f"u{i:02d}" for i in range(users)]
    s = Scenario(seed=seed, providers=providers,
                 users={n: i % providers for i, n in enumerate(names)})
    pairs = [(o, r) for o in names for r in names if o != r]
    s.grant_graph = rng.sample(pairs, min(grants, len(pairs)))
    tick = 0
    for i in range(sends):
        owner, sender = rng.choice(s.grant_graph)
        tick += 1
        s.schedule.append(Action(tick, sender, "send", (owner, rng.randint(*body_sizes))))
        if fetch_every and (i + 1) % fetch_every == 0:
            for n in names:
                tick += 1
                s.schedule.append(Action(tick, n, "fetch"))
    for n in names:
        tick += 1
        s.schedule.append(Action(tick, n, "fetch"))
    for kind, count in (("UNAUTHORIZED_NOTE", unauthorized), ("FORGED_GRANT", forged_grants),
                        ("TAMPERED_NOTE", tampered), ("PICKUP_REPLAY", replays),
                        ("CODE_PROBE", probes)):
        if count:
            s.adversaries.append(AttackSpec(kind, count))
    s.validate()
    return s


# -- cost model --------------------------------------------------------------------

class BaselineCost(NamedTuple):
    """Classical store-and-forward cost of a batch of mails.

    ``stored_bytes`` counts the sender-side copy plus the recipient-side
    copy; ``transferred_bytes`` counts the body relayed between providers.
    """
    stored_bytes: int
    transferred_bytes: int
    recipient_stored_bytes: int = 0


def baseline_cost_model(mail_events) -> BaselineCost:
    """Classical email accounting for a list of sends.

    ``mail_events`` holds body sizes (taken as cross-provider) or
    ``(body_size, cross_provider)`` pairs. Each body is stored by the sender's
    and the recipient's provider; a cross-provider body also crosses the link
    once and lands on a provider other than the sender's.
    """
    stored = transferred = recipient = 0
    for event in mail_events:
        size, cross = (event, True) if isinstance(event, int) else event
        stored += 2 * size
        if cross:
            transferred += size
            recipient += size
    return BaselineCost(stored, transferred, recipient)


# -- transports --------------------------------------------------------------------

@dataclass
class Frame:
    src: str
    dst: str
    kind: int
    request: bytes
    response: bytes


class LoopbackNet:
    def __init__(self, providers: dict, capture: bool = True, tcp_endpoints=None):
        self.providers = providers
        self.capture = capture
        self.link_bytes: Counter = Counter()
        self.frames: list[Frame] = []
        self._tcp = TcpTransport() if tcp_endpoints else None
        self._tcp_endpoints = tcp_endpoints or {}

    def transport(self, actor: str) -> "LoopbackTransport":
        return LoopbackTransport(self, actor)

    def roundtrip(self, actor: str, endpoint: str, request: bytes) -> bytes:
        if endpoint not in self.providers:
            raise TransportError(f"no route to {endpoint}")
        req_frame = wire.frame(request)
        if self._tcp is not None:
            response = self._tcp.roundtrip(self._tcp_endpoints[endpoint], request)
        else:
            response = self.providers[endpoint].handle(wire.unframe(req_frame))
        resp_frame = wire.frame(response)
        self.link_bytes[(actor, endpoint)] += len(req_frame)
        self.link_bytes[(endpoint, actor)] += len(resp_frame)
        if self.capture:
            kind = request[2] if len(request) > 2 else 0
            self.frames.append(Frame(actor, endpoint, kind, request, response))
        return wire.unframe(resp_frame)


@dataclass
class LoopbackTransport:
    net: LoopbackNet
    actor: str

    def roundtrip(self, endpoint: str, request: bytes) -> bytes:
        return self.net.roundtrip(self.actor, endpoint, request)


class SimClock:
    def __init__(self, start: int = EPOCH):
        self.t = start

    def now(self) -> float:
        return float(self.t)

    def advance(self, dt: int = 1) -> None:
        self.t += dt


# -- report --------------------------------------------------------------------------

@dataclass
class AttackOutcome:
    kind: str
    attempts: int = 0
    acceptances: int = 0
    details: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    seed: int
    provider_storage: dict = field(default_factory=dict)
    link_bytes: dict = field(default_factory=dict)
    spam_attempted: int = 0
    spam_delivered: int = 0
    mails_sent: int = 0
    mails_received: int = 0
    sends_dropped: int = 0
    integrity_failures: int = 0
    cross_provider_mails: int = 0
    recipient_body_bytes: int = 0
    plaintext_leaks: int = 0
    secret_leaks: int = 0
    baseline_stored_bytes: int = 0
    baseline_transferred_bytes: int = 0
    baseline_recipient_stored_bytes: int = 0
    safe_stored_bytes: int = 0
    safe_recipient_stored_bytes: int = 0
    safe_cross_traffic_bytes: int = 0
    attacks: list = field(default_factory=list)

    @property
    def storage_reduction(self) -> float:
        """Total mail storage saved versus keeping a copy on both sides."""
        if not self.baseline_stored_bytes:
            return 0.0
        return 1 - self.safe_stored_bytes / self.baseline_stored_bytes

    @property
    def combined_reduction(self) -> float:
        """Saving in (recipient-provider storage + cross-provider traffic)."""
        base = self.baseline_recipient_stored_bytes + self.baseline_transferred_bytes
        if not base:
            return 0.0
        return 1 - (self.safe_recipient_stored_bytes + self.safe_cross_traffic_bytes) / base

    def attack(self, kind: str) -> Optional[AttackOutcome]:
        for outcome in self.attacks:
            if outcome.kind == kind:
                return outcome
        return None

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["section", "name", "accounts", "notes", "depot_bodies", "pickups",
                    "transferred_bytes"])
        for name in sorted(self.provider_storage):
            u = self.provider_storage[name]
            w.writerow(["provider", name, u["accounts"], u["notes"], u["depot_bodies"],
                        u["pickups"], ""])
        for (src, dst) in sorted(self.link_bytes):
            w.writerow(["link", f"{src}->{dst}", "", "", "", "", self.link_bytes[(src, dst)]])
        return out.getvalue()

    def summary(self) -> str:
        lines = [
            f"seed                      {self.seed}",
            f"mails sent / received     {self.mails_sent} / {self.mails_received}",
            f"sends dropped             {self.sends_dropped}",
            f"spam attempted/delivered  {self.spam_attempted} / {self.spam_delivered}",
            f"integrity failures        {self.integrity_failures}",
            f"body bytes at recipients  {self.recipient_body_bytes}",
            f"plaintext / secret leaks  {self.plaintext_leaks} / {self.secret_leaks}",
            f"baseline stored/transfer  {self.baseline_stored_bytes} / "
            f"{self.baseline_transferred_bytes}",
            f"safemail stored           {self.safe_stored_bytes}",
            f"safemail recipient store  {self.safe_recipient_stored_bytes}",
            f"safemail cross traffic    {self.safe_cross_traffic_bytes}",
            f"storage reduction         {self.storage_reduction:.4f}",
            f"combined reduction        {self.combined_reduction:.4f}",
        ]
        for a in self.attacks:
            extra = " ".join(f"{k}={v}" for k, v in sorted(a.details.items()))
            lines.append(f"attack {a.kind:<18} attempts={a.attempts} "
                         f"accepted={a.acceptances} {extra}".rstrip())
        return "\n".join(lines) + "\n"


# -- simulation ----------------------------------------------------------------------

def _total_mail_bytes(usage: dict) -> int:
    return usage["notes"] + usage["depot_bodies"]


class Simulation:
    def __init__(self, scenario: Scenario, workdir: Optional[Path] = None, tcp: bool = False):
        scenario.validate()
        self.s = scenario
        self.tcp = tcp
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="safemail-sim-")
            workdir = Path(self._tmp.name)
        self.workdir = Path(workdir)
        self.rng = random.Random(scenario.seed)
        self.clock = SimClock()
        self.providers: dict[str, Provider] = {}
        for i in range(scenario.providers):
            name = f"p{i}"
            cfg = ProviderConfig(domain=f"{name}.sim", data_dir=self.workdir / name,
                                 silent_drop=scenario.silent_drop, fsync=False)
            self.providers[name] = Provider(cfg, clock=self.clock.now,
                                            entropy=SeededEntropy(self.rng.getrandbits(64)))
        self._servers = []
        endpoints = None
        if tcp:
            from .server import serve_in_thread
            self._servers = [serve_in_thread(p) for p in self.providers.values()]
            endpoints = {name: srv.endpoint for name, srv in zip(self.providers, self._servers)}
        self.net = LoopbackNet(self.providers, tcp_endpoints=endpoints)
        self.clients: dict[str, Client] = {}
        self.home: dict[str, str] = {}
        for name, idx in scenario.users.items():
            entropy = SeededEntropy(self.rng.getrandbits(64))
            keys = keystore.generate_keypair_set(entropy)
            self.clients[name] = Client(keys, self.net.transport(name), entropy=entropy,
                                        clock=self.clock.now)
            self.home[name] = f"p{idx}"
        # (owner address, sender pubkey) -> [(time, live)]
        self.grant_events: dict[tuple, list] = {}
        self.sent: dict[bytes, dict] = {}
        self.report = MetricsReport(seed=scenario.seed)

    def close(self) -> None:
        for srv in self._servers:
            srv.shutdown()
            srv.server_close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- actions ---------------------------------------------------------------

    def contact(self, name: str) -> ContactEntry:
        c = self.clients[name]
        return ContactEntry(name, c.keys.minor.public_key, self.home[name], c.address)

    def _tick(self) -> None:
        self.clock.advance()

    def _record_grant(self, owner: str, sender: str, live: bool) -> None:
        key = (str(self.clients[owner].address), self.clients[sender].keys.minor.public_key)
        self.grant_events.setdefault(key, []).append((int(self.clock.now()), live))

    def setup(self) -> None:
        for name, client in self.clients.items():
            self._tick()
            client.enroll(self.home[name])
        for name, client in self.clients.items():
            for other in self.clients:
                if other != name:
                    client.contacts.add(self.contact(other))
        for owner, sender in self.s.grant_graph:
            self._tick()
            self.clients[owner].authorize(self.contact(sender))
            self._record_grant(owner, sender, True)

    def do(self, action: Action) -> None:
        self._tick()
        if action.verb == "expire":
            for p in self.providers.values():
                p.expire()
            return
        client = self.clients[action.actor]
        if action.verb == "authorize":
            client.authorize(self.contact(action.args[0]))
            self._record_grant(action.actor, action.args[0], True)
        elif action.verb == "revoke":
            try:
                client.revoke(self.contact(action.args[0]))
                self._record_grant(action.actor, action.args[0], False)
            except ProviderError:
                pass
        elif action.verb == "send":
            self._send(action.actor, action.args[0], int(action.args[1]))
        elif action.verb == "fetch":
            for mail in client.fetch_all():
                self.report.mails_received += 1
                expected = self.sent.get(mail.note_id)
                if expected is None or expected["body"] != mail.body:
                    self.report.integrity_failures += 1

    def _send(self, sender: str, recipient: str, size: int) -> None:
        body = self.rng.randbytes(size)
        sp, rp = self.home[sender], self.home[recipient]
        cross = sp != rp
        before = {p: _total_mail_bytes(self.providers[p].storage_usage()) for p in {sp, rp}}
        link_before = (self.net.link_bytes[(sender, rp)], self.net.link_bytes[(rp, sender)])
        result = self.clients[sender].send(OutgoingMail(self.contact(recipient), body))
        if result.status != "accepted":
            self.report.sends_dropped += 1
            return
        after = {p: _total_mail_bytes(self.providers[p].storage_usage()) for p in {sp, rp}}
        self.report.mails_sent += 1
        self.sent[result.note_id] = {
            "body": body, "sender": sender, "recipient": recipient, "cross": cross,
            "code": result.extraction_code,
        }
        self.report.safe_stored_bytes += sum(after[p] - before[p] for p in after)
        if cross:
            self.report.cross_provider_mails += 1
            self.report.safe_recipient_stored_bytes += after[rp] - before[rp]
            self.report.safe_cross_traffic_bytes += (
                self.net.link_bytes[(sender, rp)] - link_before[0]
                + self.net.link_bytes[(rp, sender)] - link_before[1])

    # -- checks ----------------------------------------------------------------

    def _grant_live(self, owner: str, sender_pk: bytes, at: int) -> bool:
        live = False
        for t, state in self.grant_events.get((owner, sender_pk), []):
            if t <= at:
                live = state
        return live

    def sweep_spam(self) -> int:
        """Count board entries whose sender had no live grant when the note arrived."""
        spam = 0
        for provider in self.providers.values():
            for account in provider.accounts():
                for entry in provider.board(account.address):
                    if not self._grant_live(str(account.address),
                                            entry.note.sender_minor_pubkey, entry.received_at):
                        spam += 1
        return spam

    def _data_blob(self, name: str) -> bytes:
        return b"".join(p.read_bytes()
                        for p in iter_data_files(self.providers[name].config.data_dir))

    def scan_leaks(self) -> None:
        blobs = {name: self._data_blob(name) for name in self.providers}
        frames = b"".join(f.request + f.response for f in self.net.frames)
        everything = list(blobs.values()) + [frames]
        for info in self.sent.values():
            body = info["body"]
            if len(body) >= MIN_SCAN_BYTES and any(body in blob for blob in everything):
                self.report.plaintext_leaks += 1
            if not info["cross"]:
                continue
            sender_provider = self.providers[self.home[info["sender"]]]
            pk = self.clients[info["recipient"]].keys.minor.public_key
            entry = sender_provider._depot.get((pk, info["code"]))
            if entry is None:
                continue
            ciphertext = entry.deposit.body.ciphertext
            if len(ciphertext) >= MIN_SCAN_BYTES and \
                    ciphertext in blobs[self.home[info["recipient"]]]:
                self.report.recipient_body_bytes += len(ciphertext)
        for client in self.clients.values():
            for sk in (client.keys.major.private_key, client.keys.minor.private_key):
                for needle in (sk, sk.hex().encode()):
                    self.report.secret_leaks += sum(needle in blob for blob in everything)

    def finish(self) -> MetricsReport:
        r = self.report
        r.spam_delivered = self.sweep_spam()
        self.scan_leaks()
        base = baseline_cost_model([(len(i["body"]), i["cross"]) for i in self.sent.values()])
        r.baseline_stored_bytes = base.stored_bytes
        r.baseline_transferred_bytes = base.transferred_bytes
        r.baseline_recipient_stored_bytes = base.recipient_stored_bytes
        r.provider_storage = {n: p.storage_usage() for n, p in self.providers.items()}
        r.link_bytes = dict(self.net.link_bytes)
        r.spam_attempted = sum(a.attempts for a in r.attacks
                               if a.kind in ("UNAUTHORIZED_NOTE", "TAMPERED_NOTE"))
        return r

    def run(self) -> MetricsReport:
        self.setup()
        for action in sorted(self.s.schedule, key=lambda a: a.tick):
            self.do(action)
        if self.s.adversaries:
            adversary = Adversary(self)
            for spec in self.s.adversaries:
                self.report.attacks.append(adversary.run(spec))
        return self.finish()


# -- adversaries ---------------------------------------------------------------------

class Adversary:
    """An outsider with its own keys and an account at p0, but none of the
    victims' private keys. It can replay anything seen on the wire."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.rng = random.Random(sim.rng.getrandbits(64))
        self.entropy = SeededEntropy(self.rng.getrandbits(64))
        self.keys = keystore.generate_keypair_set(self.entropy)
        self.transport = sim.net.transport(ADVERSARY)
        self.client = Client(self.keys, self.transport, entropy=self.entropy,
                             clock=sim.clock.now)
        self.client.enroll("p0")
        self.own_keys = {self.keys.minor.public_key}
        # frames observed before the attack starts
        self.observed = list(sim.net.frames)

    def _victim(self, spec: AttackSpec) -> str:
        if spec.target != "*":
            return spec.target
        return self.rng.choice(sorted(self.sim.clients))

    def _raw(self, endpoint: str, env: wire.RequestEnvelope) -> wire.Response:
        return wire.decode(wire.Response, self.transport.roundtrip(endpoint, wire.encode(env)))

    def _open_request(self, kind: Kind, payload) -> wire.RequestEnvelope:
        return wire.RequestEnvelope(int(kind), wire.encode(payload), None, None, None)

    def _on_board(self, provider: str, address, note: wire.InboxNote) -> bool:
        return any(e.note == note for e in self.sim.providers[provider].board(address))

    def run(self, spec: AttackSpec) -> AttackOutcome:
        outcome = AttackOutcome(spec.kind)
        getattr(self, f"_{spec.kind.lower()}")(spec, outcome)
        return outcome

    def _unauthorized_note(self, spec, out) -> None:
        for i in range(spec.count):
            victim = self._victim(spec)
            contact = self.sim.contact(victim)
            keys = self.keys.minor if i % 2 == 0 else keystore.generate_keypair(self.entropy)
            self.own_keys.add(keys.public_key)
            note = wire.InboxNote(self.entropy(16), keys.public_key, self.entropy(16).hex(),
                                  self.entropy(32), "p0", int(self.sim.clock.now()))
            sig = keystore.sign(keys.private_key, wire.note_signing_payload(contact.address, note))
            self._raw(contact.depot_endpoint,
                      self._open_request(Kind.POST_NOTE, wire.PostNote(contact.address, note, sig)))
            out.attempts += 1
            if self._on_board(contact.depot_endpoint, contact.address, note):
                out.acceptances += 1

    def _forged_grant(self, spec, out) -> None:
        statuses = Counter()
        for i in range(spec.count):
            victim = self._victim(spec)
            contact = self.sim.contact(victim)
            victim_major = self.sim.clients[victim].keys.major.public_key
            endpoint = contact.depot_endpoint
            grant = wire.AuthorizationGrant(contact.address, self.keys.minor.public_key,
                                            int(self.sim.clock.now()), self.entropy(64))
            variant = i % 3
            if variant == 0:
                # claim to be the victim, random request signature
                nonce = self.client._challenge(endpoint)
                env = wire.RequestEnvelope(int(Kind.SUBMIT_GRANT), wire.encode(grant), nonce,
                                           victim_major, self.entropy(64))
            elif variant == 1:
                # properly authenticated as ourselves, grant names the victim
                env = self.client.signed_request(endpoint, Kind.SUBMIT_GRANT, grant)
            else:
                # grant signed with our own major key, request claims to be the victim
                forged = wire.sign_grant(self.keys.major.private_key, contact.address,
                                         self.keys.minor.public_key, int(self.sim.clock.now()))
                nonce = self.client._challenge(endpoint)
                payload = wire.encode(forged)
                sig = keystore.sign(self.keys.major.private_key,
                                    wire.request_signing_payload(Kind.SUBMIT_GRANT, payload, nonce))
                env = wire.RequestEnvelope(int(Kind.SUBMIT_GRANT), payload, nonce,
                                           victim_major, sig)
            resp = self._raw(endpoint, env)
            statuses[resp.error or Status(resp.status).name] += 1
            out.attempts += 1
            granted = self.keys.minor.public_key in next(
                a.grants for a in self.sim.providers[endpoint].accounts()
                if a.address == contact.address)
            if resp.status != Status.ERROR or granted:
                out.acceptances += 1
        out.details["responses"] = dict(sorted(statuses.items()))

    def _tamper(self, note: wire.InboxNote, how: int) -> wire.InboxNote:
        from dataclasses import replace
        if how == 0:
            code = note.extraction_code
            return replace(note, extraction_code=("0" if code[0] != "0" else "1") + code[1:])
        if how == 1:
            return replace(note, posted_at=note.posted_at + 1)
        if how == 2:
            return replace(note, body_digest=self.entropy(32))
        if how == 3:
            others = [c.keys.minor.public_key for c in self.sim.clients.values()
                      if c.keys.minor.public_key != note.sender_minor_pubkey]
            return replace(note, sender_minor_pubkey=self.rng.choice(others))
        return replace(note, depot_hint=(note.depot_hint or "") + "x")

    def _tampered_note(self, spec, out) -> None:
        posts = [f for f in self.observed if f.kind == Kind.POST_NOTE]
        if not posts:
            out.details["skipped"] = "no observed notes"
            return
        for i in range(spec.count):
            frame = posts[i % len(posts)]
            env = wire.decode(wire.RequestEnvelope, frame.request)
            post = env.decode_payload()
            how = i % 6
            if how == 5:
                # replay unchanged note into another inbox
                victim = self._victim(spec)
                target = self.sim.contact(victim)
                if target.address == post.recipient_address:
                    continue
                new = wire.PostNote(target.address, post.note, post.sender_signature)
                endpoint = target.depot_endpoint
            else:
                new = wire.PostNote(post.recipient_address, self._tamper(post.note, how),
                                    post.sender_signature)
                endpoint = frame.dst
            self._raw(endpoint, self._open_request(Kind.POST_NOTE, new))
            out.attempts += 1
            board = self.sim.providers[endpoint].board(new.recipient_address)
            if how == 5:
                landed = any(e.note == new.note and e.owner_address == new.recipient_address
                             for e in board)
            else:
                landed = any(e.note == new.note for e in board)
            if landed:
                out.acceptances += 1

    def _pickup_replay(self, spec, out) -> None:
        pickups = [f for f in self.observed if f.kind == Kind.PICKUP]
        if not pickups:
            out.details["skipped"] = "no observed pickups"
            return
        obtained = recovered = 0
        for i in range(spec.count):
            frame = pickups[i % len(pickups)]
            resp = wire.decode(wire.Response, self.transport.roundtrip(frame.dst, frame.request))
            out.attempts += 1
            if resp.status != Status.OK:
                continue
            obtained += 1
            box = wire.decode(wire.SealedBoxMsg, resp.body).box()
            for sk in (self.keys.minor.private_key, self.keys.major.private_key):
                try:
                    keystore.open_box(sk, box)
                    recovered += 1
                except keystore.OpenError:
                    pass
        out.acceptances = recovered
        out.details.update(bodies_obtained=obtained, plaintext_recoveries=recovered)

    def _code_probe(self, spec, out) -> None:
        live = sorted((pk, code) for p in self.sim.providers.values()
                      for (pk, code) in p._depot)
        if not live:
            out.details["skipped"] = "no deposits"
            return
        where = {}
        for name, p in self.sim.providers.items():
            for key in p._depot:
                where[key] = name
        seen = {"existing": Counter(), "missing": Counter()}
        for i in range(spec.count):
            pk, code = live[i % len(live)]
            bucket = "existing"
            if i % 2:
                code, bucket = self.entropy(len(code) // 2 or 1).hex()[:len(code)], "missing"
            sig = keystore.sign(self.keys.minor.private_key, wire.pickup_signing_payload(code))
            raw = self.transport.roundtrip(where[live[i % len(live)]],
                                           wire.encode(self._open_request(
                                               Kind.PICKUP, wire.Pickup(pk, code, sig))))
            resp = wire.decode(wire.Response, raw)
            seen[bucket][(resp.status, resp.error, len(raw))] += 1
            out.attempts += 1
            if resp.status == Status.OK:
                out.acceptances += 1
        shapes_existing = set(seen["existing"])
        shapes_missing = set(seen["missing"])
        out.details["distinguishable"] = shapes_existing != shapes_missing
        out.details["response_shapes"] = len(shapes_existing | shapes_missing)


def run_scenario(s: Scenario, tcp: bool = False, workdir: Optional[Path] = None) -> MetricsReport:
    with Simulation(s, workdir=workdir, tcp=tcp) as sim:
        return sim.run()


def run_attacks(s: Scenario) -> list[AttackOutcome]:
    return run_scenario(s).attacks
