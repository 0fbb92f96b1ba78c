"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line
in the terminal summary (see conftest.py).

Run on its own with ``python3 -m pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import hashlib
import logging
import os
import time
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from safemail import keystore as ks
from safemail import wire
from safemail.client import OutgoingMail
from safemail.errors import AuthError, NotFound, SizeError
from safemail.provider import iter_data_files
from safemail.simnet import Action, Scenario, Simulation, random_scenario, run_scenario
from safemail.wire import Status

import helpers as h

criterion = pytest.mark.criterion


@pytest.fixture(scope="module")
def federation():
    """The five-provider spam scenario, run once and kept open for inspection."""
    scenario = random_scenario(2026, providers=5, users=20, grants=50, sends=500,
                               unauthorized=1000, forged_grants=100)
    with Simulation(scenario) as sim:
        started = time.perf_counter()
        report = sim.run()
        elapsed = time.perf_counter() - started
        yield sim, report, elapsed


def _two_provider_batch(seed=11, mails=100, size=10 * 1024):
    s = Scenario(seed=seed, providers=2, users={"alice": 0, "bob": 1},
                 grant_graph=[("alice", "bob")])
    s.schedule = [Action(i + 1, "bob", "send", ("alice", size)) for i in range(mails)]
    s.schedule.append(Action(mails + 1, "alice", "fetch"))
    return s


# -- 1 -------------------------------------------------------------------------

@criterion(1, "spam elimination: 0 spam delivered, 0 forged grants accepted, < 30 s")
def test_spam_elimination(federation):
    _, report, elapsed = federation
    unauthorized = report.attack("UNAUTHORIZED_NOTE")
    forged = report.attack("FORGED_GRANT")
    print(f"sent={report.mails_sent} received={report.mails_received} "
          f"unauthorized={unauthorized.attempts}/{unauthorized.acceptances} "
          f"forged={forged.attempts}/{forged.acceptances} elapsed={elapsed:.1f}s")
    assert report.mails_sent == 500 and report.mails_received == 500
    assert unauthorized.attempts == 1000 and forged.attempts == 100
    assert report.spam_delivered == 0
    assert unauthorized.acceptances == 0
    assert forged.acceptances == 0
    assert elapsed < 30


# -- 2 -------------------------------------------------------------------------

def _recipient_side_body_hits(sim):
    """Body bytes of cross-provider mail found at the recipient's provider."""
    hits = 0
    depots = {name: {(e.deposit.recipient_minor_pubkey, e.deposit.extraction_code): e
                     for e in p.depot_entries()} for name, p in sim.providers.items()}
    blobs = {name: b"".join(f.read_bytes() for f in iter_data_files(p.config.data_dir))
             for name, p in sim.providers.items()}
    for info in sim.sent.values():
        if not info["cross"]:
            continue
        recipient_home = sim.home[info["recipient"]]
        pk = sim.clients[info["recipient"]].keys.minor.public_key
        entry = depots[sim.home[info["sender"]]][(pk, info["code"])]
        ciphertext = entry.deposit.body.ciphertext
        blob = blobs[recipient_home]
        hits += info["body"] in blob
        hits += ciphertext in blob
        hits += any(e.depositor_address.domain != sim.providers[recipient_home].domain
                    for e in sim.providers[recipient_home].depot_entries()
                    if e.deposit.extraction_code == info["code"])
    return hits


@criterion(2, "recipient providers store no mail bodies")
def test_recipient_provider_storage_is_zero(federation):
    sim, report, _ = federation
    assert report.cross_provider_mails > 0
    assert _recipient_side_body_hits(sim) == 0
    assert report.recipient_body_bytes == 0
    # every depot holds only bodies its own users deposited
    for name, provider in sim.providers.items():
        assert all(e.depositor_address.domain == provider.domain
                   for e in provider.depot_entries()), name
    with Simulation(_two_provider_batch()) as sim2:
        report2 = sim2.run()
        assert report2.provider_storage["p0"]["depot_bodies"] == 0
        assert report2.provider_storage["p1"]["depot_bodies"] > 0
        assert _recipient_side_body_hits(sim2) == 0


# -- 3 -------------------------------------------------------------------------

@criterion(3, "100 x 10 KiB across 2 providers: combined reduction >= 45%, deterministic")
def test_resource_reduction():
    first = run_scenario(_two_provider_batch())
    second = run_scenario(_two_provider_batch())
    print(f"combined={first.combined_reduction:.4f} storage={first.storage_reduction:.4f} "
          f"baseline_transfer={first.baseline_transferred_bytes} "
          f"safe_cross={first.safe_cross_traffic_bytes} "
          f"safe_recipient_stored={first.safe_recipient_stored_bytes}")
    assert first.mails_received == 100
    assert first.to_csv() == second.to_csv()
    assert first.combined_reduction >= 0.45


# -- 4 -------------------------------------------------------------------------

def _note_of_size(sender, size):
    base = h.note(sender, hint="x")
    return replace(base, depot_hint="x" * (size - wire.encoded_size(base) + 1))


@criterion(4, "note bound: 1024 bytes accepted, 1025 rejected at encode and ingest")
def test_note_bound(tmp_path):
    sender = h.keys(2).minor
    fits, big = _note_of_size(sender, 1024), _note_of_size(sender, 1025)
    assert len(wire.encode(fits)) == 1024
    with pytest.raises(wire.WireError):
        wire.encode(big)
    raw_big = wire._encode_raw(big)
    assert len(raw_big) == 1025
    with pytest.raises(wire.WireError):
        wire.decode(wire.InboxNote, raw_big)

    gogo = h.make_provider(tmp_path, "gogo.com", h.Clock())
    owner = h.keys(1)
    address = h.register(gogo, owner.major)
    h.grant(gogo, owner.major, address, sender.public_key)
    assert h.post(gogo, sender, address, fits) == Status.ACCEPTED
    with pytest.raises(SizeError):
        h.post(gogo, sender, address, replace(big, note_id=b"\x02" * 16))
    assert [e.note for e in h.list_notes(gogo, owner.major)] == [fits]


# -- 5 -------------------------------------------------------------------------

keys32 = st.integers(min_value=1, max_value=ks.ORDER - 1).map(lambda d: d.to_bytes(32, "big"))


@settings(max_examples=10_000, deadline=None, database=None)
@given(sk=keys32, m1=st.binary(max_size=64), m2=st.binary(max_size=64), sk2=keys32)
def _forgery_cases(sk, m1, m2, sk2):
    pk = ks.public_key_from_private(sk)
    sig = ks.sign(sk, m1)
    assert ks.verify(pk, m1, sig)
    if m1 != m2:
        assert not ks.verify(pk, m2, sig)
    if sk != sk2:
        assert not ks.verify(ks.public_key_from_private(sk2), m1, sig)


@criterion(5, "integrity: 1e4 forgery cases, 512/512 bit flips, 1 KiB byte flips, roundtrips")
def test_end_to_end_integrity(tmp_path):
    started = time.perf_counter()
    _forgery_cases()

    pair = ks.generate_keypair(ks.SeededEntropy(7))
    sig = ks.sign(pair.private_key, b"extraction-code")
    flipped = 0
    for bit in range(512):
        bad = bytearray(sig)
        bad[bit // 8] ^= 1 << (bit % 8)
        flipped += not ks.verify(pair.public_key, b"extraction-code", bytes(bad))
    assert flipped == 512

    box = ks.seal(pair.public_key, os.urandom(1024))
    failed = 0
    for i in range(len(box.ciphertext)):
        bad = bytearray(box.ciphertext)
        bad[i] ^= 0xFF
        try:
            ks.open_box(pair.private_key, replace(box, ciphertext=bytes(bad)))
        except ks.OpenError:
            failed += 1
    assert failed == len(box.ciphertext) == 1024

    for size in (0, 1, 1024, 1024 * 1024):
        world = h.World(tmp_path / str(size))
        alice_entry, _ = world.introduce()
        body = os.urandom(size)
        assert world.bob.send(OutgoingMail(alice_entry, body)).status == "accepted"
        assert [m.body for m in world.alice.fetch_all()] == [body]
    elapsed = time.perf_counter() - started
    print(f"elapsed={elapsed:.1f}s")
    assert elapsed < 120


# -- 6 -------------------------------------------------------------------------

@criterion(6, "pickup capability: only a valid code signature releases the body; replays useless")
def test_pickup_capability(tmp_path):
    yahoo = h.make_provider(tmp_path, "yahoo.com", h.Clock())
    alice, bob, eve = h.keys(1), h.keys(2), h.keys(66)
    h.register(yahoo, bob.major)
    h.deposit(yahoo, bob.major, alice.minor.public_key, "code-1", b"for alice only")

    box = h.pickup(yahoo, alice.minor, "code-1")
    assert ks.open_box(alice.minor.private_key, box) == b"for alice only"
    with pytest.raises(AuthError):
        h.pickup(yahoo, alice.minor, "code-1", signer=eve.minor)
    with pytest.raises(AuthError):
        h.pickup(yahoo, alice.minor, "code-1", signer=alice.major)
    # a valid signature over a different code opens nothing
    with pytest.raises(NotFound):
        h.pickup(yahoo, alice.minor, "code-2")
    other_code = ks.sign(alice.minor.private_key, wire.pickup_signing_payload("code-2"))
    with pytest.raises(AuthError):
        yahoo.pickup(alice.minor.public_key, "code-1", other_code)
    good = ks.sign(alice.minor.private_key, wire.pickup_signing_payload("code-1"))
    for i in range(64):
        bad = bytearray(good)
        bad[i] ^= 0x01
        with pytest.raises(AuthError):
            yahoo.pickup(alice.minor.public_key, "code-1", bytes(bad))

    scenario = random_scenario(6, providers=2, users=4, grants=6, sends=20, unauthorized=0,
                               forged_grants=0, replays=100)
    replay = run_scenario(scenario).attack("PICKUP_REPLAY")
    print(f"replays={replay.attempts} bodies={replay.details['bodies_obtained']} "
          f"recoveries={replay.details['plaintext_recoveries']}")
    assert replay.attempts == 100
    assert replay.details["bodies_obtained"] > 0
    assert replay.details["plaintext_recoveries"] == 0


# -- 7 -------------------------------------------------------------------------

@criterion(7, "no secrets server-side: canary keys and plaintexts absent from data and frames")
def test_no_secrets_server_side(tmp_path, federation):
    world = h.World(tmp_path, seed=4242)
    alice_entry, _ = world.introduce()
    canaries = [b"CANARY-%03d-" % i + hashlib.sha256(b"%d" % i).digest() * 4
                for i in range(20)]
    for body in canaries:
        assert world.bob.send(OutgoingMail(alice_entry, body)).status == "accepted"
    assert sorted(m.body for m in world.alice.fetch_all()) == sorted(canaries)

    secrets = [kp.private_key for c in (world.alice, world.bob)
               for kp in (c.keys.major, c.keys.minor)]
    needles = canaries + [c[:16] for c in canaries] + secrets + \
        [s.hex().encode() for s in secrets]
    places = [b"".join(f.read_bytes() for f in iter_data_files(p.config.data_dir))
              for p in world.providers.values()]
    places.append(b"".join(f.request + f.response for f in world.net.frames))
    assert all(len(p) > 0 for p in places)
    hits = sum(needle in place for needle in needles for place in places)
    assert hits == 0

    _, report, _ = federation
    assert report.secret_leaks == 0 and report.plaintext_leaks == 0


# -- 8 -------------------------------------------------------------------------

@criterion(8, "crash consistency at >= 50 injection points")
def test_crash_consistency(tmp_path):
    logging.disable(logging.WARNING)
    try:
        points, failures = h.crash_matrix(tmp_path)
    finally:
        logging.disable(logging.NOTSET)
    print(f"points={len(points)} failures={len(failures)}")
    assert len(points) >= 50
    assert failures == []


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
