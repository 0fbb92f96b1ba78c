"""Run the five-provider spam scenario and print attack outcomes."""
import argparse
import time

from safemail.simnet import random_scenario, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=2026)
    ap.add_argument("--providers", type=int, default=5)
    ap.add_argument("--users", type=int, default=20)
    ap.add_argument("--grants", type=int, default=50)
    ap.add_argument("--sends", type=int, default=500)
    ap.add_argument("--unauthorized", type=int, default=1000)
    ap.add_argument("--forged", type=int, default=100)
    ap.add_argument("--tcp", action="store_true", help="run providers as real TCP servers")
    args = ap.parse_args()

    scenario = random_scenario(args.seed, providers=args.providers, users=args.users,
                               grants=args.grants, sends=args.sends,
                               unauthorized=args.unauthorized, forged_grants=args.forged)
    started = time.perf_counter()
    report = run_scenario(scenario, tcp=args.tcp)
    elapsed = time.perf_counter() - started
    print(report.summary())
    for outcome in report.attacks:
        print(f"{outcome.kind:<18} attempts={outcome.attempts:<5} accepted={outcome.acceptances}")
    print(f"spam delivered: {report.spam_delivered}  ({elapsed:.1f}s)")
    return 0 if report.spam_delivered == 0 else 1


if __name__ == "__main__":
    raise SystemExit(main())
