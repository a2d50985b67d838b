"""Full lifecycle in one process: clean a corpus, build a store, serve
it, query it, then rotate the key and show clients keep working.

Run from the repository root after an editable install:

    python3 demos/end_to_end.py
"""

import random

from migp.client import MigpClient
from migp.oprf import PrfKey
from migp.pipeline import build_store, clean_corpus, rotate_store
from migp.server import MigpServer, ServerConfig
from migp.similarity import dasr_ruleset

RAW_ROWS = [
    ("Alice@Example.com ", "summer2019"),
    ("alice@example.com", "hunter2!"),
    ("bob@example.com", "monkey12"),
    ("carol@example.com", "correcthorse"),
    ("carol@example.com", ""),  # dropped by cleaning
    ("mallory@example.com", "p@ssw0rd"),
]

PROBES = [
    # (username, password, client-side variants m, what to expect)
    ("alice@example.com", "hunter2!", 0, "exact breach entry"),
    ("bob@example.com", "monkey1", 0, "server-stored variant of monkey12"),
    ("bob@example.com", "monkey1234", 3, "needs a client-side tweak too"),
    ("carol@example.com", "unrelated9", 5, "no breach, no variant"),
    ("dave@example.com", "summer2019", 0, "right password, wrong account"),
]


def main():
    credentials, report = clean_corpus(RAW_ROWS)
    print(f"cleaned corpus: kept {report.kept} of {report.total} rows")

    rules = dasr_ruleset()
    key = PrfKey.generate(epoch=1, rng=random.Random(7))
    store, sidecar = build_store(
        credentials, key, l=8, rules=rules, n=10, with_sidecar=True
    )
    print(f"store: {store.header.entry_count} entries "
          f"(n={store.header.n} variants per password), "
          f"{sum(1 for b in store.buckets if b)} occupied buckets")

    with MigpServer(store, key, ServerConfig(port=0)) as server:
        client = MigpClient(server.url)
        print(f"\nserving on {server.url}")
        for username, password, m, note in PROBES:
            outcome = client.check(username, password, m=m)
            print(f"  {username:22s} {password:12s} m={m}  ->  "
                  f"{str(outcome):24s} ({note})")

        # Key rotation: re-key from the sidecar, no corpus needed.  The
        # server swaps snapshots atomically; the client only has to drop
        # its cached epoch.
        new_key = PrfKey.generate(epoch=2, rng=random.Random(8))
        rotated, _ = rotate_store(store, key, new_key, sidecar)
        server.swap(rotated, new_key)
        client.params(refresh=True)
        print("\nrotated to epoch 2; same probes:")
        for username, password, m, note in PROBES:
            outcome = client.check(username, password, m=m)
            print(f"  {username:22s} {password:12s} m={m}  ->  {outcome}")


if __name__ == "__main__":
    main()
