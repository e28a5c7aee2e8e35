"""``sqdisk`` command line.

Exit codes: 0 success, 1 usage error, 2 I/O or format error.
"""
import argparse
import json
import os
import re
import sys

from . import bench
from .chainstore import ChainError, convert, open_chain, snapshot_scalable, snapshot_vanilla, stream
from .engine_base import EngineError
from .imgfmt import FormatError
from .metrics import (
    LatencyModelParams,
    empty_row,
    predict_avg_cost,
    predict_snapshot_size,
    report,
    snapshot_overhead,
)

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2

_UNITS = {"": 1, "b": 1,
          "k": 1 << 10, "kib": 1 << 10, "kb": 10 ** 3,
          "m": 1 << 20, "mib": 1 << 20, "mb": 10 ** 6,
          "g": 1 << 30, "gib": 1 << 30, "gb": 10 ** 9,
          "t": 1 << 40, "tib": 1 << 40, "tb": 10 ** 12}


def parse_size(text):
    """``64M``/``64MiB`` are binary, ``50GB`` is decimal, a bare number is bytes."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError("invalid size %r" % text)
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "%s: error: %s\n" % (self.prog, message))


def _write_report(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def cmd_genchain(args):
    spec = bench.ChainSpec(size=args.size, cluster_bits=args.cluster_bits, length=args.length,
                           fill_pct=args.fill_pct, seed=args.seed, mode=args.mode,
                           distribution=args.distribution)
    active = bench.genchain(spec, args.out)
    print(active)
    return EXIT_OK


def cmd_bench_seq(args):
    res = bench.bench_seq(args.chain, args.engine, args.cache_bytes, args.block_size,
                          args.inject_fetch_latency, passes=args.passes, convert_first=args.convert)
    _write_report(report(res.row, args.format), args.report)
    return EXIT_OK


def cmd_bench_rand(args):
    if args.ops == 0:
        chain = open_chain(bench.resolve_chain(args.chain))
        try:
            row = empty_row(args.engine, chain.length, args.cache_bytes)
        finally:
            chain.close()
    else:
        row = bench.bench_rand(args.chain, args.engine, args.cache_bytes, args.io_size, args.ops, args.seed,
                               args.inject_fetch_latency, convert_first=args.convert).row
    _write_report(report(row, args.format), args.report)
    return EXIT_OK


def cmd_snapshot(args):
    with open_chain(bench.resolve_chain(args.chain), writable=True) as chain:
        snap = snapshot_scalable if args.mode == "scalable" else snapshot_vanilla
        manifest = snap(chain, args.out)
        print("%s %d bytes written" % (manifest.active, chain.last_snapshot_bytes))
    _update_sidecar(args.chain, manifest.active)
    return EXIT_OK


def cmd_stream(args):
    with open_chain(bench.resolve_chain(args.chain), writable=True) as chain:
        manifest = stream(chain, args.start, args.end)
        print("%s length %d" % (manifest.active, manifest.length))
    return EXIT_OK


def cmd_convert(args):
    with open_chain(bench.resolve_chain(args.chain), writable=True) as chain:
        manifest = convert(chain, args.target)
        print("%s converted to %s (%d layers)" % (manifest.active, args.target, manifest.length))
    return EXIT_OK


def _update_sidecar(chain_arg, active):
    if os.path.isdir(chain_arg) and os.path.exists(os.path.join(chain_arg, bench.SIDECAR)):
        p = os.path.join(chain_arg, bench.SIDECAR)
        with open(p) as f:
            meta = json.load(f)
        meta["active"] = os.path.relpath(active, chain_arg)
        with open(p, "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def chain_stats(chain, with_hash=False):
    layers = []
    for layer in chain.layers:
        layers.append({
            "index": layer.chain_index,
            "path": layer.path,
            "backing_index": layer.scalable,
            "file_size": os.path.getsize(layer.path),
            "l2_tables": len(layer.allocated_tables()),
            "allocated_clusters": bench.allocated_clusters(layer),
        })
    h = chain.active.header
    stats = {
        "length": chain.length,
        "disk_size": h.disk_size,
        "cluster_bits": h.cluster_bits,
        "empty_layer_size": h.empty_size,
        "predicted_scalable_snapshot_size": predict_snapshot_size(h.disk_size, h.cluster_bits),
        "active_size": layers[-1]["file_size"],
        "layers": layers,
    }
    if with_hash:
        stats["content_sha256"] = bench.content_hash(chain)
    return stats


def cmd_stats(args):
    with open_chain(bench.resolve_chain(args.chain)) as chain:
        stats = chain_stats(chain, args.hash)
    if args.format == "json":
        print(json.dumps(stats, indent=2, sort_keys=True))
        return EXIT_OK
    print("chain length %d, disk %d bytes, cluster 2^%d" % (stats["length"], stats["disk_size"],
                                                             stats["cluster_bits"]))
    for l in stats["layers"]:
        print("  [%d] %s%s size=%d tables=%d clusters=%d" % (
            l["index"], l["path"], " +index" if l["backing_index"] else "", l["file_size"],
            l["l2_tables"], l["allocated_clusters"]))
    print("empty layer size %d" % stats["empty_layer_size"])
    print("predicted worst-case scalable snapshot %d, active volume %d" % (
        stats["predicted_scalable_snapshot_size"], stats["active_size"]))
    if "content_sha256" in stats:
        print("content sha256 %s" % stats["content_sha256"])
    return EXIT_OK


def cmd_model(args):
    if args.model == "overhead":
        per = snapshot_overhead(args.size, args.cluster_bits)
        total = predict_snapshot_size(args.size, args.cluster_bits, s_vq=args.s_vq)
        out = {"disk_size": args.size, "per_snapshot_overhead": per,
               "snapshot_size": total, "chain_length": args.chain_length,
               "chain_overhead": per * args.chain_length,
               "chain_overhead_pct": 100.0 * per * args.chain_length / args.size}
        if args.format == "json":
            print(json.dumps(out, indent=2, sort_keys=True))
        else:
            print("~%.1f MB per snapshot (%d bytes); snapshot size %d bytes" % (per / 1e6, per, total))
            print("chain of %d: %.0f MB (%.2f%% of the disk)" % (
                args.chain_length, out["chain_overhead"] / 1e6, out["chain_overhead_pct"]))
    else:
        p = LatencyModelParams(t_mem=args.t_mem, t_disk=args.t_disk, t_layers=args.t_layers,
                               t_fetch=args.t_fetch, hit=args.hit, miss=args.miss, unalloc=args.unalloc,
                               n=args.n)
        y = predict_avg_cost(p)
        if args.format == "json":
            print(json.dumps({"avg_cost_ns": y}, sort_keys=True))
        else:
            print("average lookup cost %.3f ns (%.3f us)" % (y, y / 1000))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="sqdisk", description="Copy-on-write snapshot chains with direct-access lookup.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("genchain", help="generate a synthetic chain")
    g.add_argument("--size", type=parse_size, default=1 << 30)
    g.add_argument("--cluster-bits", type=int, default=16)
    g.add_argument("--length", type=int, default=1)
    g.add_argument("--fill-pct", type=float, default=90.0)
    g.add_argument("--distribution", choices=["uniform"], default="uniform")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=["vanilla", "scalable"], default="vanilla")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_genchain)

    def bench_common(b):
        b.add_argument("--chain", required=True, help="chain directory or active volume")
        b.add_argument("--engine", choices=sorted(bench.ENGINES), default="scalable")
        b.add_argument("--cache-bytes", type=parse_size, default=1 << 20)
        b.add_argument("--inject-fetch-latency", type=float, default=81.0, metavar="US")
        b.add_argument("--report", default="-")
        b.add_argument("--format", choices=["csv", "json"], default="csv")
        b.add_argument("--convert", action="store_true", help="convert a plain chain for the scalable engine")

    b = sub.add_parser("bench-seq", help="sequential full-disk read")
    bench_common(b)
    b.add_argument("--block-size", type=parse_size, default=4 << 20)
    b.add_argument("--passes", type=int, default=1)
    b.set_defaults(func=cmd_bench_seq)

    b = sub.add_parser("bench-rand", help="random small reads")
    bench_common(b)
    b.add_argument("--io-size", type=parse_size, default=4096)
    b.add_argument("--ops", type=int, default=10_000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_rand)

    s = sub.add_parser("snapshot", help="add a new active volume")
    s.add_argument("--chain", required=True)
    s.add_argument("--mode", choices=["vanilla", "scalable"], default="vanilla")
    s.add_argument("--out", default=None, help="path of the new layer")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("stream", help="merge a range of backing layers")
    s.add_argument("--chain", required=True)
    s.add_argument("--from", dest="start", type=int, required=True)
    s.add_argument("--to", dest="end", type=int, required=True)
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("convert", help="convert a chain between formats")
    s.add_argument("--chain", required=True)
    s.add_argument("--target", choices=["vanilla", "scalable"], required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("stats", help="describe a chain")
    s.add_argument("--chain", required=True)
    s.add_argument("--format", choices=["text", "json"], default="text")
    s.add_argument("--hash", action="store_true", help="also hash the full guest-visible content")
    s.set_defaults(func=cmd_stats)

    m = sub.add_parser("model", help="evaluate the analytic models")
    msub = m.add_subparsers(dest="model", required=True, parser_class=_Parser)
    o = msub.add_parser("overhead", help="per-snapshot disk overhead of the scalable format")
    o.add_argument("--size", type=parse_size, required=True)
    o.add_argument("--cluster-bits", type=int, default=16)
    o.add_argument("--s-vq", type=parse_size, default=None, help="size of an empty plain layer")
    o.add_argument("--chain-length", type=int, default=1)
    o.add_argument("--format", choices=["text", "json"], default="text")
    lat = msub.add_parser("latency", help="average lookup cost")
    lat.add_argument("--hit", type=float, default=0.0)
    lat.add_argument("--miss", type=float, default=0.0)
    lat.add_argument("--unalloc", type=float, default=0.0)
    lat.add_argument("--n", type=float, default=1.0)
    lat.add_argument("--t-mem", type=float, default=100.0, help="ns")
    lat.add_argument("--t-disk", type=float, default=80_000.0, help="ns")
    lat.add_argument("--t-layers", type=float, default=1_000.0, help="ns")
    lat.add_argument("--t-fetch", type=float, default=None, help="ns, defaults to t-disk + t-layers")
    lat.add_argument("--format", choices=["text", "json"], default="text")
    m.set_defaults(func=cmd_model)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        return args.func(args)
    except ValueError as e:
        if isinstance(e, FormatError):
            print("sqdisk: %s" % e, file=sys.stderr)
            return EXIT_IO
        print("sqdisk: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except (ChainError, EngineError, OSError) as e:
        print("sqdisk: %s" % e, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
