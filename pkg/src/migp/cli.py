"""Operator command line: clean, mine, build, serve, query, attack,
synth, rotate, calibrate.

Exit codes: 0 success (or verdict none), 1 operational error, and for
``query`` only: 2 similar, 3 match.  Key material stays in
permission-restricted files and is never written to stdout or logs.
"""

import argparse
import logging
import os
import signal
import sys
import threading

from . import oprf, pipeline
from .attack import (
    PasswordDistribution,
    format_cells,
    render_cells,
    simulate_extraction,
    synth_distribution,
    synth_pair_corpus,
)
from .client import ClientError, MigpClient, local_blocklist_hits
from .oprf import FastHash, PrfKey
from .pipeline import (
    CorpusError,
    build_blocklist,
    build_store,
    load_store,
    read_corpus,
    save_store,
    clean_corpus,
    write_blocklist,
    Sidecar,
)
from .ratelimit import (
    SaltParams,
    SaltedHash,
    SlowHash,
    TimelockHash,
    TimelockParams,
    calibrate_slow_hash,
    calibrate_timelock,
    generate_timelock_params,
)
from .server import MigpServer, ServerConfig
from .similarity import (
    dasr_ruleset,
    load_ruleset,
    mine_rules,
    parse_path,
    save_ruleset,
    serialize_path,
    valid_password,
)

EXIT_NONE = 0
EXIT_ERROR = 1
EXIT_SIMILAR = 2
EXIT_MATCH = 3

log = logging.getLogger("migp.cli")


class CliError(Exception):
    pass


# --- config -----------------------------------------------------------------

_CONFIG_DEFAULTS = {
    "group_id": "ristretto255",
    "l": "8",
    "n": "10",
    "rules": "dasr",
    "m_max": "11",
    "beta": "0",
    "entry_mode": oprf.ENTRY_MODE_LAST_BIT,
    "backend": "fast",
    "listen": "127.0.0.1:8042",
    "log_level": "info",
    "rate_capacity": "1000",
    "rate_refill_per_second": "100",
    "epoch": "1",
    "slow_log2_n": "14",
    "salt_bits": "8",
    "max_user_passwords": str(pipeline.MAX_USER_PASSWORDS),
}


class Config:
    """Line-oriented ``key = value`` settings with # comments.

    Relative paths resolve against the config file's directory so a
    deployment tree can move as a unit.
    """

    def __init__(self, values, base_dir="."):
        unknown = set(values) - set(_CONFIG_DEFAULTS) - {
            "store", "key_file", "sidecar", "blocklist", "timelock_params",
            "timelock_cost",
        }
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        self.values = dict(_CONFIG_DEFAULTS, **values)
        self.base_dir = base_dir
        if self.get_int("m_max") < 1:
            raise CliError("m_max must be at least 1")
        if not 8 <= self.get_int("l") <= 32:
            raise CliError("l out of [8, 32]")
        if self.values["entry_mode"] not in (
            oprf.ENTRY_MODE_LAST_BIT, oprf.ENTRY_MODE_FLAG_BYTE,
        ):
            raise CliError(f"unknown entry_mode {self.values['entry_mode']!r}")

    @classmethod
    def load(cls, path):
        values = {}
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise CliError(f"{path}:{lineno}: expected key = value")
                    key, _, value = line.partition("=")
                    values[key.strip()] = value.strip()
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}") from exc
        return cls(values, base_dir=os.path.dirname(os.path.abspath(path)))

    def get(self, key, default=None):
        return self.values.get(key, default)

    def get_int(self, key):
        try:
            return int(self.values[key])
        except (KeyError, ValueError):
            raise CliError(f"config key {key!r} must be an integer") from None

    def get_float(self, key):
        try:
            return float(self.values[key])
        except (KeyError, ValueError):
            raise CliError(f"config key {key!r} must be a number") from None

    def path(self, key, required=False):
        value = self.values.get(key)
        if not value:
            if required:
                raise CliError(f"config key {key!r} is required")
            return None
        return os.path.normpath(os.path.join(self.base_dir, value))

    def listen_address(self):
        listen = self.values["listen"]
        host, _, port = listen.rpartition(":")
        if not host or not port.isdigit():
            raise CliError(f"listen must be host:port, got {listen!r}")
        return host, int(port)


def update_config(path, updates):
    """Rewrite config keys in place, keeping comments and order."""
    lines = []
    pending = dict(updates)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                stripped = raw.split("#", 1)[0]
                if "=" in stripped:
                    key = stripped.partition("=")[0].strip()
                    if key in pending:
                        lines.append(f"{key} = {pending.pop(key)}\n")
                        continue
                lines.append(raw)
    for key, value in pending.items():
        lines.append(f"{key} = {value}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


# --- shared helpers --------------------------------------------------------


def _load_rules(spec, base_dir="."):
    if spec == "dasr":
        return dasr_ruleset()
    path = spec if os.path.isabs(spec) else os.path.join(base_dir, spec)
    try:
        return load_ruleset(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load rule set {spec!r}: {exc}") from exc


def _load_or_create_key(path, epoch):
    if os.path.exists(path):
        key = PrfKey.load(path)
        if key.epoch != epoch:
            raise CliError(
                f"key file epoch {key.epoch} does not match configured {epoch}"
            )
        return key
    key = PrfKey.generate(epoch=epoch)
    key.save(path)
    log.info("generated new key file %s (epoch %d)", path, epoch)
    return key


def _build_backend(config, server_side):
    """H2 back-end per config; the server side loads trapdoor params."""
    name = config.get("backend")
    if name == "fast":
        return FastHash()
    if name == "slow":
        return SlowHash(log2_n=config.get_int("slow_log2_n"))
    if name == "salted":
        if not server_side:
            raise CliError("the salted back-end digests only server-side")
        return SaltedHash(SaltParams(config.get_int("salt_bits")))
    if name == "timelock":
        params_path = config.path("timelock_params", required=True)
        try:
            params = TimelockParams.load(params_path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load time-lock params: {exc}") from exc
        if server_side and not params.has_trapdoor:
            raise CliError("server-side time-lock params need the trapdoor")
        if "timelock_cost" in config.values:
            params = params.with_cost(config.get_int("timelock_cost"))
        return TimelockHash(params)
    raise CliError(f"unknown back-end {name!r}")


def read_distribution(path):
    """password TAB probability per line; weights are renormalized."""
    weighted = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                password, sep, weight = line.rpartition("\t")
                if not sep:
                    raise CliError(f"{path}:{lineno}: expected password\\tweight")
                try:
                    weighted.append((password, float(weight)))
                except ValueError:
                    raise CliError(f"{path}:{lineno}: bad weight {weight!r}") from None
    except OSError as exc:
        raise CliError(f"cannot read distribution: {exc}") from exc
    try:
        return PasswordDistribution.from_weights(weighted)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc


def write_distribution(path, dist):
    with open(path, "w", encoding="utf-8") as fh:
        for password, prob in zip(dist.support, dist.probs):
            fh.write(f"{password}\t{prob:.17g}\n")


def _parse_grid(text, what):
    try:
        grid = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise CliError(f"{what} must be comma-separated integers") from None
    if not grid:
        raise CliError(f"{what} is empty")
    return grid


def _read_pairs(path):
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                w1, sep, w2 = line.partition("\t")
                if not sep:
                    raise CliError(f"{path}:{lineno}: expected two tab-separated passwords")
                pairs.append((w1, w2))
    except OSError as exc:
        raise CliError(f"cannot read pairs: {exc}") from exc
    return pairs


# --- subcommands -------------------------------------------------------------


def cmd_clean(args):
    try:
        rows = list(read_corpus(args.infile))
        kept, report = clean_corpus(rows, max_user_passwords=args.max_user_passwords)
        pipeline.write_corpus(args.out, ((c.username, c.password) for c in kept))
    except (OSError, CorpusError) as exc:
        raise CliError(str(exc)) from exc
    print(f"total = {report.total}")
    print(f"kept = {report.kept}")
    print(f"bad_password = {report.bad_password}")
    print(f"empty_username = {report.empty_username}")
    print(f"heavy_user = {report.heavy_user}")
    return EXIT_NONE


def cmd_mine(args):
    pairs = _read_pairs(args.pairs)
    skipped = sum(
        1 for w1, w2 in pairs
        if w1 == w2 or not valid_password(w1) or not valid_password(w2)
    )
    try:
        rules = mine_rules(pairs, args.max_rules, name=args.name)
        save_ruleset(rules, args.out)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    if skipped:
        print(f"skipped {skipped} of {len(pairs)} pairs "
              "(equal members or invalid passwords)", file=sys.stderr)
    for path, support in zip(rules.paths, rules.supports):
        print(f"{serialize_path(path)}\t{support}")
    return EXIT_NONE


def _print_stats(l, stats, label):
    print(f"{l}\t{stats['buckets']}\t{stats['entries']}"
          f"\t{stats['mean']:.2f}\t{stats['std']:.2f}\t{stats['max']}\t{label}")


def cmd_build(args):
    config = Config.load(args.config)
    key = _load_or_create_key(
        config.path("key_file", required=True), config.get_int("epoch")
    )
    rules = _load_rules(config.get("rules"), config.base_dir)
    try:
        rows = list(read_corpus(args.corpus))
    except (OSError, CorpusError) as exc:
        raise CliError(str(exc)) from exc
    credentials, report = clean_corpus(
        rows, max_user_passwords=config.get_int("max_user_passwords")
    )
    if not credentials:
        raise CliError("corpus is empty after cleaning")
    if report.rejected:
        log.info("cleaning dropped %d of %d rows", report.rejected, report.total)

    beta = config.get_int("beta")
    n = config.get_int("n")
    blocklist = frozenset()
    if beta > 0:
        blocklist = build_blocklist(credentials, beta, rules, n)
        blocklist_path = config.path("blocklist")
        if blocklist_path:
            write_blocklist(blocklist_path, blocklist)

    sidecar_path = config.path("sidecar")
    h2 = _build_backend(config, server_side=True)
    built = build_store(
        credentials,
        key,
        config.get_int("l"),
        rules,
        n,
        blocklist=blocklist,
        entry_mode=config.get("entry_mode"),
        h2=h2,
        beta=beta,
        ruleset_id=rules.name,
        with_sidecar=sidecar_path is not None,
    )
    if sidecar_path is not None:
        store, sidecar = built
        sidecar.save(sidecar_path)
    else:
        store = built
    store_path = args.store or config.path("store", required=True)
    save_store(store, store_path)
    print("l\tbuckets\tentries\tavg\tstd\tmax\tbeta")
    _print_stats(store.header.l, store.stats(), f"beta={beta}")
    return EXIT_NONE


def cmd_serve(args):
    config = Config.load(args.config)
    store = load_store(config.path("store", required=True))
    if store.header.entry_mode != config.get("entry_mode"):
        raise CliError(
            f"store entry mode {store.header.entry_mode!r} does not match "
            f"config {config.get('entry_mode')!r}"
        )
    key = PrfKey.load(config.path("key_file", required=True))
    host, port = config.listen_address()
    if args.port is not None:
        port = args.port
    timelock_public = None
    if config.get("backend") == "timelock":
        params = TimelockParams.load(config.path("timelock_params", required=True))
        if "timelock_cost" in config.values:
            params = params.with_cost(config.get_int("timelock_cost"))
        timelock_public = params.public()
    server_config = ServerConfig(
        m_max=config.get_int("m_max"),
        rate_capacity=config.get_int("rate_capacity"),
        rate_refill_per_second=config.get_float("rate_refill_per_second"),
        host=host,
        port=port,
        timelock_public=timelock_public,
    )
    server = MigpServer(store, key, server_config)
    server.start()
    stop = threading.Event()

    def shutdown(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, shutdown)
    signal.signal(signal.SIGINT, shutdown)
    print(f"listening on {server.url}", flush=True)
    stats = store.stats()
    log.info(
        "serving %d entries in %d buckets, epoch %d",
        stats["entries"], stats["buckets"], store.header.epoch,
    )
    stop.wait()
    server.stop()
    return EXIT_NONE


def _client_backend(params, slow_log2_n):
    """Pick the client-side H2 matching the server's advertised back-end."""
    name = params.get("backend", "fast")
    if name == "fast":
        return FastHash()
    if name == "slow":
        return SlowHash(log2_n=slow_log2_n)
    if name == "salted":
        return SaltedHash(SaltParams(int(params["salt_bits"])))
    if name == "timelock":
        spec = params.get("timelock")
        if not spec:
            raise CliError("server advertises time-lock but sent no parameters")
        return TimelockHash(
            TimelockParams(int(spec["modulus"], 16), int(spec["cost"]))
        )
    raise CliError(f"server advertises unknown back-end {name!r}")


def cmd_query(args):
    password = args.password
    if password is None:
        password = sys.stdin.readline().rstrip("\n")
    if not password:
        raise CliError("empty password")
    if args.blocklist:
        try:
            blocklist = pipeline.read_blocklist(args.blocklist)
        except OSError as exc:
            raise CliError(str(exc)) from exc
        if local_blocklist_hits(password, blocklist):
            # blocklisted passwords are absent server-side, so the
            # protocol answer below will be none regardless of breaches
            print("warning: password is on the server blocklist; "
                  "a none verdict carries no information", file=sys.stderr)
    rules = _load_rules(args.rules) if args.rules else None
    try:
        probe = MigpClient(args.endpoint, client_rules=rules, timeout=args.timeout)
        params = probe.params()
        client = MigpClient(
            args.endpoint,
            client_rules=rules,
            h2=_client_backend(params, args.slow_log2_n),
            timeout=args.timeout,
        )
        outcome = client.check(args.username, password, m=args.m)
    except ClientError as exc:
        raise CliError(str(exc)) from exc
    print(outcome)
    if outcome.verdict == "match":
        return EXIT_MATCH
    if outcome.verdict == "similar":
        return EXIT_SIMILAR
    return EXIT_NONE


def cmd_attack(args):
    if args.dist:
        dist = read_distribution(args.dist)
    else:
        dist = synth_distribution(args.synth_seed, args.synth_size, args.zipf_s)
    rules = _load_rules(args.rules)
    n_grid = _parse_grid(args.n_grid, "n-grid")
    q_grid = _parse_grid(args.q_grid, "q-grid")
    beta_grid = _parse_grid(args.beta_grid, "beta-grid")
    cells = []
    for n in n_grid:
        cells.extend(
            simulate_extraction(
                dist,
                rules if n > 0 else None,
                n,
                q_grid=q_grid,
                beta_grid=beta_grid,
                targets=args.targets,
                m=args.batch_m,
                folds=args.folds,
                seed=args.seed,
                final_guess_counts=not args.no_final_guess,
                include_blocklisted_targets=not args.exclude_blocklisted_targets,
                candidate_k=args.candidate_k,
            )
        )
    sys.stdout.write(format_cells(cells) if args.machine else render_cells(cells))
    return EXIT_NONE


def cmd_synth(args):
    dist = synth_distribution(args.seed, args.size, args.zipf_s)
    write_distribution(args.out, dist)
    emitted = f"wrote {len(dist)} passwords to {args.out}"
    if args.pairs:
        if not args.pairs_out or not args.tweak:
            raise CliError("--pairs needs --pairs-out and --tweak")
        try:
            tweak = parse_path(args.tweak)
        except ValueError as exc:
            raise CliError(f"bad tweak: {exc}") from exc
        pairs = synth_pair_corpus(args.seed, args.pairs, tweak, dist=dist)
        with open(args.pairs_out, "w", encoding="utf-8") as fh:
            for w1, w2 in pairs:
                fh.write(f"{w1}\t{w2}\n")
        emitted += f", {len(pairs)} pairs to {args.pairs_out}"
    print(emitted)
    return EXIT_NONE


def cmd_rotate(args):
    config = Config.load(args.config)
    store_path = config.path("store", required=True)
    sidecar_path = config.path("sidecar")
    if not sidecar_path or not os.path.exists(sidecar_path):
        raise CliError(
            "no rotation sidecar on disk: rebuild the store from the corpus "
            "with `migp build` instead"
        )
    store = load_store(store_path)
    old_key = PrfKey.load(config.path("key_file", required=True))
    sidecar = Sidecar.load(sidecar_path)
    new_epoch = old_key.epoch + 1
    if os.path.exists(args.new_key):
        new_key = PrfKey.load(args.new_key)
        if new_key.epoch != new_epoch:
            raise CliError(
                f"new key epoch {new_key.epoch} is not old epoch + 1"
            )
    else:
        new_key = PrfKey.generate(epoch=new_epoch)
        new_key.save(args.new_key)
        log.info("generated rotation key %s (epoch %d)", args.new_key, new_epoch)
    h2 = _build_backend(config, server_side=True)
    if not h2.deterministic:
        raise CliError("a salted store cannot rotate in place; rebuild instead")
    rotated, new_sidecar = pipeline.rotate_store(store, old_key, new_key, sidecar, h2=h2)
    save_store(rotated, args.out or store_path)
    new_sidecar.save(sidecar_path)
    print(f"rotated epoch {store.header.epoch} -> {rotated.header.epoch}")
    return EXIT_NONE


def cmd_calibrate(args):
    if args.backend == "slow":
        h = calibrate_slow_hash(args.target_ms)
        print(f"slow_log2_n = {h.log2_n}")
        if args.config:
            update_config(args.config, {"backend": "slow",
                                        "slow_log2_n": h.log2_n})
        return EXIT_NONE
    if args.backend == "timelock":
        if args.params and os.path.exists(args.params):
            params = TimelockParams.load(args.params)
        else:
            if not args.params:
                raise CliError("--params is required for the time-lock back-end")
            log.info("generating fresh time-lock modulus (one-time cost)")
            params = generate_timelock_params(cost=1)
        calibrated = calibrate_timelock(params, args.target_ms, probe=args.probe)
        calibrated.save(args.params)
        print(f"timelock_cost = {calibrated.cost}")
        if args.config:
            update_config(args.config, {
                "backend": "timelock",
                "timelock_params": args.params,
                "timelock_cost": calibrated.cost,
            })
        return EXIT_NONE
    raise CliError(f"cannot calibrate back-end {args.backend!r}")


# --- argument parsing --------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="migp",
        description="Breach-alerting service tooling: build and serve "
        "bucketized PRF stores, query them, and measure guessing attacks.",
    )
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="validate and canonicalize a raw corpus")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-user-passwords", type=int,
                   default=pipeline.MAX_USER_PASSWORDS)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("mine", help="mine tweak rules from password pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--max-rules", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("build", help="build the bucketized PRF store")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--store", default=None, help="override config store path")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("serve", help="serve a built store over HTTP")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=None,
                   help="override the configured port (0 = ephemeral)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="check one credential against a server")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--username", required=True)
    p.add_argument("--password", default=None,
                   help="omit to read one line from stdin")
    p.add_argument("-m", type=int, default=0,
                   help="client-side variants to include")
    p.add_argument("--rules", default=None,
                   help="client rule set file (default: built-in table)")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--slow-log2-n", type=int, default=14,
                   help="cost for the slow back-end (out-of-band setting)")
    p.add_argument("--blocklist", default=None,
                   help="exported blocklist file; warn when the queried "
                        "password is on it (verdict unchanged)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("attack", help="simulate the guessing attack over a grid")
    p.add_argument("--dist", default=None, help="password\\tweight file")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--synth-size", type=int, default=10000)
    p.add_argument("--zipf-s", type=float, default=1.0)
    p.add_argument("--rules", default="dasr")
    p.add_argument("--n-grid", default="0,10")
    p.add_argument("--q-grid", default="10,100,1000")
    p.add_argument("--beta-grid", default="0")
    p.add_argument("--targets", type=int, default=500)
    p.add_argument("--batch-m", type=int, default=1)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--machine", action="store_true",
                   help="tab-separated output instead of the aligned table")
    p.add_argument("--no-final-guess", action="store_true")
    p.add_argument("--exclude-blocklisted-targets", action="store_true")
    p.add_argument("--candidate-k", type=int, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("synth", help="generate a synthetic password distribution")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--zipf-s", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=0,
                   help="also emit this many same-user tweak pairs")
    p.add_argument("--tweak", default=None, help="planted tweak, e.g. ins:!:-1")
    p.add_argument("--pairs-out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rotate", help="re-key a store from its sidecar")
    p.add_argument("--config", required=True)
    p.add_argument("--new-key", required=True,
                   help="new key file; generated if missing")
    p.add_argument("--out", default=None, help="write here instead of in place")
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("calibrate", help="fit rate-limit costs to a target latency")
    p.add_argument("--backend", required=True, choices=["slow", "timelock"])
    p.add_argument("--target-ms", type=float, default=100.0)
    p.add_argument("--params", default=None,
                   help="time-lock params file (created when absent)")
    p.add_argument("--probe", type=int, default=4096)
    p.add_argument("--config", default=None,
                   help="persist the calibrated cost into this config")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
