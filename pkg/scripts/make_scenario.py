"""Write a random scenario file for ``safemail sim-run``."""
import argparse

from safemail.simnet import format_scenario, random_scenario

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("out")
p.add_argument("--seed", type=int, default=1)
p.add_argument("--providers", type=int, default=3)
p.add_argument("--users", type=int, default=8)
p.add_argument("--grants", type=int, default=12)
p.add_argument("--sends", type=int, default=40)
p.add_argument("--unauthorized", type=int, default=50)
p.add_argument("--forged", type=int, default=10)
p.add_argument("--tampered", type=int, default=10)
p.add_argument("--replays", type=int, default=10)
p.add_argument("--probes", type=int, default=10)

if __name__ == "__main__":
    a = p.parse_args()
    s = random_scenario(a.seed, providers=a.providers, users=a.users, grants=a.grants,
                        sends=a.sends, unauthorized=a.unauthorized, forged_grants=a.forged,
                        tampered=a.tampered, replays=a.replays, probes=a.probes)
    with open(a.out, "w") as f:
        f.write(format_scenario(s))
    print(f"wrote {a.out}: {len(s.users)} users, {len(s.schedule)} actions")
