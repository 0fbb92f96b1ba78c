"""Sweep body size and report storage and traffic savings against the
classical store-and-forward baseline, for a two-provider pair."""
import argparse
import csv
import sys

from safemail.simnet import Action, Scenario, run_scenario


def batch(seed, mails, size):
    s = Scenario(seed=seed, providers=2, users={"alice": 0, "bob": 1},
                 grant_graph=[("alice", "bob")])
    s.schedule = [Action(i + 1, "bob", "send", ("alice", size)) for i in range(mails)]
    s.schedule.append(Action(mails + 1, "alice", "fetch"))
    return s


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--mails", type=int, default=100)
    ap.add_argument("--sizes", default="1024,4096,10240,102400",
                    help="comma-separated body sizes in bytes")
    args = ap.parse_args()

    out = csv.writer(sys.stdout)
    out.writerow(["body_bytes", "mails", "baseline_recipient_stored", "baseline_transfer",
                  "recipient_stored", "cross_traffic", "combined_reduction",
                  "storage_reduction"])
    for size in (int(x) for x in args.sizes.split(",")):
        r = run_scenario(batch(args.seed, args.mails, size))
        out.writerow([size, r.mails_received, r.baseline_recipient_stored_bytes,
                      r.baseline_transferred_bytes, r.safe_recipient_stored_bytes,
                      r.safe_cross_traffic_bytes, f"{r.combined_reduction:.4f}",
                      f"{r.storage_reduction:.4f}"])


if __name__ == "__main__":
    main()
