"""Drive a Provider directly, signing requests the way a client would."""

import hashlib

from safemail import keystore as ks
from safemail import wire
from safemail.provider import Auth, Provider, ProviderConfig
from safemail.wire import Kind


class Clock:
    def __init__(self, t=1_700_000_000.0):
        self.t = t

    def __call__(self):
        return self.t


def make_provider(path, domain="gogo.com", clock=None, **kw):
    entropy = kw.pop("entropy", None)
    crash_hook = kw.pop("crash_hook", None)
    kw.setdefault("fsync", False)
    config = ProviderConfig(domain=domain, data_dir=path, **kw)
    return Provider(config, clock=clock or Clock(), entropy=entropy, crash_hook=crash_hook)


def auth(provider, keypair, kind, payload_msg):
    nonce = provider.issue_challenge()
    signed = wire.request_signing_payload(kind, wire.encode(payload_msg), nonce)
    return Auth(keypair.public_key, nonce, ks.sign(keypair.private_key, signed))


def register(provider, keypair):
    nonce = provider.issue_challenge()
    signed = wire.request_signing_payload(Kind.REGISTER, wire.encode(wire.Empty()), nonce)
    return provider.register(keypair.public_key, nonce, ks.sign(keypair.private_key, signed))


def grant(provider, owner_major, address, sender_pub, issued_at=1):
    g = wire.sign_grant(owner_major.private_key, address, sender_pub, issued_at)
    provider.submit_grant(auth(provider, owner_major, Kind.SUBMIT_GRANT, g), g)
    return g


def revoke(provider, owner_major, sender_pub):
    provider.revoke_grant(auth(provider, owner_major, Kind.REVOKE_GRANT,
                               wire.RevokeGrant(sender_pub)), sender_pub)


def note(sender, code="123456", posted_at=1, note_id=None, hint=None, digest=b"\x00" * 32):
    note_id = note_id or hashlib.sha256(f"{code}/{posted_at}".encode()).digest()[:16]
    return wire.InboxNote(note_id, sender.public_key, code, digest, hint, posted_at)


def post(provider, sender, address, n):
    sig = ks.sign(sender.private_key, wire.note_signing_payload(address, n))
    return provider.post_note(address, n, sig)


def list_notes(provider, owner_major):
    return provider.list_notes(auth(provider, owner_major, Kind.LIST_NOTES, wire.Empty()))


def ack(provider, owner_major, note_id):
    provider.ack_note(auth(provider, owner_major, Kind.ACK_NOTE, wire.AckNote(note_id)), note_id)


def deposit(provider, depositor_major, recipient_pub, code, body, deposit_id=None):
    box = ks.seal(recipient_pub, body)
    d = wire.MailDeposit(deposit_id or hashlib.sha256(code.encode()).digest()[:16],
                         recipient_pub, code, wire.SealedBoxMsg.of(box), 1)
    provider.deposit_mail(auth(provider, depositor_major, Kind.DEPOSIT, d), d)
    return d


def pickup(provider, recipient_minor, code, signer=None):
    signer = signer or recipient_minor
    sig = ks.sign(signer.private_key, wire.pickup_signing_payload(code))
    return provider.pickup(recipient_minor.public_key, code, sig)


def keys(seed):
    return ks.generate_keypair_set(ks.SeededEntropy(seed))


# -- crash injection -----------------------------------------------------------

def snapshot(provider):
    """Observable provider state, comparable across reloads."""
    accounts = {}
    for record in provider.accounts():
        notes = tuple(sorted((e.note.note_id, e.acked) for e in provider.board(record.address)))
        grants = tuple(sorted((k, g.issued_at) for k, g in record.grants.items()))
        accounts[str(record.address)] = (record.major_pubkey, grants, notes)
    depot = tuple(sorted((e.deposit.recipient_minor_pubkey, e.deposit.extraction_code,
                          e.pickup_count) for e in provider.depot_entries()))
    return accounts, depot


def crash_workload(alice, bob, clock):
    """Every mutating provider operation, in an order that hits each persistence site."""
    def steps(p):
        a_addr = ks.derive_address(alice.major.public_key, p.domain)
        notes = [note(bob.minor, code=f"w{i}", posted_at=i) for i in range(3)]
        yield "register alice", lambda: register(p, alice.major)
        yield "register bob", lambda: register(p, bob.major)
        yield "grant", lambda: grant(p, alice.major, a_addr, bob.minor.public_key, 1)
        for i, n in enumerate(notes):
            yield f"post {i}", lambda n=n: post(p, bob.minor, a_addr, n)
        yield "ack", lambda: ack(p, alice.major, notes[0].note_id)
        yield "deposit 1", lambda: deposit(p, bob.major, alice.minor.public_key, "w1", b"one")
        yield "deposit 2", lambda: deposit(p, bob.major, alice.minor.public_key, "w2", b"two")
        yield "pickup", lambda: pickup(p, alice.minor, "w1")
        yield "pickup again", lambda: pickup(p, alice.minor, "w1")
        yield "revoke", lambda: revoke(p, alice.major, bob.minor.public_key)
        yield "regrant", lambda: grant(p, alice.major, a_addr, bob.minor.public_key, 2)

        def age_out():
            clock.t += p.config.deposit_ttl_seconds + 1
            p.expire()
        yield "expire", age_out
        yield "deposit 3", lambda: deposit(p, bob.major, alice.minor.public_key, "w3", b"three")
        yield "ack again", lambda: ack(p, alice.major, notes[1].note_id)
    return steps


class _CrashAt:
    def __init__(self, target=None):
        self.target = target
        self.sites = []

    def __call__(self, site):
        self.sites.append(site)
        if self.target is not None and len(self.sites) == self.target:
            from safemail.store import SimulatedCrash
            raise SimulatedCrash(site)


def _run(path, hook, seed=1):
    alice, bob = keys(seed), keys(seed + 1)
    clock = Clock()
    p = make_provider(path, "gogo.com", clock, crash_hook=hook)
    snaps = [snapshot(p)]
    for name, op in crash_workload(alice, bob, clock)(p):
        yield name, snaps[-1]
        op()
        snaps.append(snapshot(p))
        yield name, snaps[-1]


def crash_matrix(root):
    """Crash at every persistence step of the workload and judge each reload.

    Returns ``(points, failures)``: ``points`` lists ``(site, step)`` for each
    injection, ``failures`` describes reloads that were not schema-valid or whose
    state was neither the before- nor the after-state of the interrupted step.
    """
    from safemail.provider import check_data_dir
    from safemail.store import SimulatedCrash

    reference = _CrashAt()
    transitions = {}
    events = list(_run(root / "reference", reference))
    # pair the before/after snapshots of each step
    for (name, before), (_, after) in zip(events[::2], events[1::2]):
        transitions[name] = (before, after)
    total = len(reference.sites)

    points, failures = [], []
    for k in range(1, total + 1):
        path = root / f"crash-{k:03d}"
        hook = _CrashAt(k)
        step = None
        try:
            for step, _ in _run(path, hook):
                pass
        except SimulatedCrash:
            pass
        else:
            failures.append(f"point {k}: no crash happened")
            continue
        site = hook.sites[-1]
        points.append((site, step))
        try:
            reloaded = make_provider(path, "gogo.com", Clock(2_000_000_000))
        except Exception as exc:
            failures.append(f"point {k} ({step} @ {site}): reload failed: {exc!r}")
            continue
        problems = check_data_dir(reloaded.config)
        if problems:
            failures.append(f"point {k} ({step} @ {site}): {problems}")
        state = snapshot(reloaded)
        before, after = transitions[step]
        if state not in (before, after) and not _between(step, state, before, after):
            failures.append(f"point {k} ({step} @ {site}): state is neither before nor after")
        # the reopened store must also be clean on a second open
        if check_data_dir(make_provider(path, "gogo.com", Clock()).config):
            failures.append(f"point {k}: second reopen not clean")
    return points, failures


def _between(step, state, before, after):
    # expiry purges entries one at a time; each entry is atomic on its own
    if step != "expire" or state[0] != before[0]:
        return False
    return set(after[1]) <= set(state[1]) <= set(before[1])


# -- two-provider world for client tests ---------------------------------------

class World:
    """gogo hosts alice, yahoo hosts bob; traffic goes through a capturing loopback."""

    def __init__(self, root, seed=0, **provider_kw):
        from safemail.client import Client
        from safemail.simnet import LoopbackNet
        self.clock = Clock()
        self.providers = {name: make_provider(root / name, name, self.clock, **provider_kw)
                          for name in ("gogo", "yahoo")}
        self.net = LoopbackNet(self.providers)
        self.root = root
        self.alice = Client(keys(seed + 1), self.net.transport("alice"),
                            ks.SeededEntropy(seed + 100), self.clock)
        self.bob = Client(keys(seed + 2), self.net.transport("bob"),
                          ks.SeededEntropy(seed + 200), self.clock)
        self.alice.enroll("gogo")
        self.bob.enroll("yahoo")

    def contact_of(self, client, label):
        from safemail.client import ContactEntry
        return ContactEntry(label, client.keys.minor.public_key, client.home, client.address)

    def introduce(self, grant=True):
        """Exchange contact lines out of band; alice optionally grants bob."""
        bob_entry = self.contact_of(self.bob, "bob")
        alice_entry = self.contact_of(self.alice, "alice")
        self.bob.contacts.add(alice_entry)
        if grant:
            self.alice.authorize(bob_entry)
        else:
            self.alice.contacts.add(bob_entry)
        return alice_entry, bob_entry

    def reload(self, name):
        config = self.providers[name].config
        self.providers[name] = make_provider(config.data_dir, name, self.clock)
        self.net.providers[name] = self.providers[name]
