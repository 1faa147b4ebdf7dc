"""``iret`` command line.

Every subcommand takes ``--config FILE.toml`` (flat keys) and flags; flags
win over the file, the file wins over built-in defaults. Failures print one
line ``error:<code>:<message>`` to stderr. Exit status: 0 ok, 1 usage
error, 2 data error.
"""

import argparse
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as data_mod
from .aggregate import KINDS, AggregatorConfig, aggregate
from .encoder import (
    IMAGE_SHAPE,
    TrainConfig,
    encode,
    feature_maps,
    finetune_ap,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_contrastive,
)
from .errors import DataError, IretError, UsageError
from .evaluate import format_report
from .gradcheck import run_suite
from .pipeline import Dataset, ablate_aggregators, ablate_dims, make_split
from .retrieval import build_db, load_db, query, read_rankings, save_db, write_rankings
from .seeding import generator
from .whiten import fit_whitener, l2_normalize, load_whitener, postprocess, save_whitener

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("iret")

# key -> (type, default); every key may appear in the config file
OPTIONS = {
    "seed": (int, 0),
    "data": (str, None),
    "manifest": (str, "manifest.tsv"),
    "gt": (str, None),
    "checkpoint": (str, None),
    "db": (str, None),
    "queries": (str, None),
    "whitener": (str, None),
    "ranked": (str, None),
    "out": (str, None),
    "trace": (str, None),
    "instances": (int, 16),
    "views": (int, 8),
    "queries_per_instance": (int, 2),
    "aggregator": (str, "GeM"),
    "gem_p": (float, 3.0),
    "rmac_levels": (int, 3),
    "rmac_overlap": (float, 0.4),
    "raw": (bool, False),
    "out_dim": (int, None),
    "dims": (str, "128,256,512,1024,2048,4096"),
    "k": (int, None),
    "temperature": (float, 0.5),
    "ap_bins": (int, 20),
    "batch_size": (int, 32),
    "steps": (int, 500),
    "lr": (float, 1e-3),
    "trials": (int, 20),
}

INPUT_PATHS = ("data", "gt", "checkpoint", "db", "queries", "whitener", "ranked")
OUTPUT_PATHS = ("out", "trace")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        flags = sorted({s for a in self._actions for s in a.option_strings})
        raise UsageError("%s (valid flags: %s)" % (message, " ".join(flags)))


def _flag(parser, key, help_text=None, required=False):
    typ, default = OPTIONS[key]
    name = "--" + key.replace("_", "-")
    suffix = " (required)" if required else (" (default: %s)" % (default,) if default is not None else "")
    if typ is bool:
        parser.add_argument(name, dest=key, action="store_const", const=True, default=None,
                            help=(help_text or "") + suffix)
    else:
        parser.add_argument(name, dest=key, type=typ, default=None, help=(help_text or "") + suffix)


def build_parser():
    parser = Parser(prog="iret", description="Instance-level image retrieval toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    def command(name, help_text, *flags, required=()):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(_required=list(required))
        p.add_argument("--config", help="TOML file with flat key/value settings")
        for key in flags:
            _flag(p, key, required=key in required)
        return p

    agg = ("aggregator", "gem_p", "rmac_levels", "rmac_overlap")
    command("synth", "generate the synthetic instance set with its query ground truth",
            "out", "instances", "views", "queries_per_instance", "seed", required=("out",))
    command("extract", "encode images into a descriptor database",
            "data", "manifest", "gt", "checkpoint", "seed", "raw", *agg, "out", required=("data", "out"))
    command("whiten", "fit a PCA whitener on a descriptor database",
            "db", "out_dim", "out", required=("db", "out"))
    command("index", "post-process a database (L2, whiten, L2)",
            "db", "whitener", "out", required=("db", "whitener", "out"))
    command("query", "rank a database for every query descriptor",
            "db", "queries", "k", "out", required=("db", "queries", "out"))
    command("eval", "score ranked lists against ground truth",
            "ranked", "gt", "out", required=("ranked", "gt"))
    command("train", "contrastive (NT-Xent) pre-training",
            "data", "manifest", "checkpoint", "seed", "steps", "batch_size", "temperature", "lr",
            *agg, "out", "trace", required=("data", "out"))
    command("finetune", "fine-tune an encoder with the quantized AP loss",
            "data", "manifest", "checkpoint", "seed", "steps", "batch_size", "ap_bins", "lr",
            *agg, "out", "trace", required=("data", "checkpoint", "out"))
    command("gradcheck", "finite-difference check of every analytic gradient", "seed", "trials")
    command("ablate-agg", "mAP of each aggregator on the same last-conv features",
            "data", "checkpoint", "seed", "queries_per_instance", "out_dim", "gem_p",
            "rmac_levels", "rmac_overlap", "out", required=("data",))
    command("ablate-dim", "mAP as a function of the whitening output dimension",
            "data", "checkpoint", "seed", "queries_per_instance", "dims", *agg, "out",
            required=("data",))
    return parser


def resolve(args):
    """Merge defaults < config file < flags; reject unknown config keys."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                cfg = tomllib.load(fh)
        except FileNotFoundError:
            raise UsageError("config file not found: %s" % args.config) from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError("invalid TOML in %s: %s" % (args.config, exc)) from None
        unknown = sorted(set(cfg) - set(OPTIONS))
        if unknown:
            raise UsageError("unknown config keys: %s" % ", ".join(unknown))
    opts = {}
    for key, (typ, default) in OPTIONS.items():
        value = getattr(args, key, None)
        if value is None and key in cfg:
            value = cfg[key]
            if not isinstance(value, typ) and not (typ is float and isinstance(value, int)):
                raise UsageError("config key %r must be %s" % (key, typ.__name__))
            value = typ(value)
        opts[key] = default if value is None else value
    for key in args._required:
        if opts[key] is None:
            raise UsageError("missing required option --%s" % key.replace("_", "-"))
    for key in INPUT_PATHS:
        if key in args._required or getattr(args, key, None) is not None or key in cfg:
            if opts[key] is not None and not os.path.exists(opts[key]):
                raise UsageError("path does not exist: --%s %s" % (key, opts[key]))
    for key in OUTPUT_PATHS:
        if opts[key] is not None:
            parent = os.path.dirname(os.path.abspath(opts[key]))
            if args.command != "synth" and not os.path.isdir(parent):
                raise UsageError("output directory does not exist: %s" % parent)
    return opts


def aggregator_config(o, kind=None):
    try:
        return AggregatorConfig(kind or o["aggregator"], o["gem_p"], o["rmac_levels"], o["rmac_overlap"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_params(o):
    if o["checkpoint"]:
        return load_checkpoint(o["checkpoint"])
    return init_params(generator(o["seed"], "encoder", "init"))


def load_images(o, manifest=None):
    manifest = manifest or o["manifest"]
    path = manifest if os.path.isabs(manifest) else os.path.join(o["data"], manifest)
    if not os.path.exists(path):
        raise UsageError("manifest not found: %s" % path)
    entries = data_mod.read_manifest(path)
    if not entries:
        raise DataError("manifest %s is empty" % path)
    images = [data_mod.read_ppm(os.path.join(o["data"], name)) for name, _ in entries]
    ids = [data_mod.image_id(name) for name, _ in entries]
    return images, np.array([lab for _, lab in entries]), ids


def fit_size(img):
    if img.shape != IMAGE_SHAPE:
        img = data_mod.resize_bilinear(img, IMAGE_SHAPE[1], IMAGE_SHAPE[2])
    return img


def load_queries(o):
    """Query crops from ground truth, ids are the query names."""
    images, ids = [], []
    for name in data_mod.list_queries(o["gt"]):
        gt = data_mod.parse_ground_truth(o["gt"], name)
        img = data_mod.read_ppm(os.path.join(o["data"], gt.query_image + ".ppm"))
        images.append(data_mod.crop_bbox(img, gt.bbox))
        ids.append(name)
    if not ids:
        raise DataError("no queries found in %s" % o["gt"])
    return images, ids


def describe(params, images, o, cfg=None):
    cfg = cfg or aggregator_config(o)
    x = np.stack([fit_size(img) for img in images])
    if o["raw"]:
        return l2_normalize(np.stack([aggregate(f, cfg) for f in feature_maps(params, x)]))
    return encode(params, x, cfg)


# -- subcommands ------------------------------------------------------------


def cmd_synth(o):
    spec = data_mod.SynthSpec(o["instances"], o["views"], seed=o["seed"])
    manifest = data_mod.synth_generate(spec, o["out"])
    labels = np.array([lab for _, lab in manifest])
    ids = [data_mod.image_id(n) for n, _ in manifest]
    split = make_split(Dataset(None, labels, ids), o["queries_per_instance"], size=spec.size)
    corpus = set(split.corpus.ids)
    data_mod.write_manifest([m for m in manifest if data_mod.image_id(m[0]) in corpus],
                            os.path.join(o["out"], "corpus.tsv"))
    data_mod.write_manifest([m for m in manifest if data_mod.image_id(m[0]) not in corpus],
                            os.path.join(o["out"], "queries.tsv"))
    for gt in split.ground_truth:
        data_mod.write_ground_truth(os.path.join(o["out"], "gt"), gt)
    print("wrote %d images, %d queries to %s" % (len(manifest), len(split.ground_truth), o["out"]))


def cmd_extract(o):
    params = load_params(o)
    if o["gt"]:
        images, ids = load_queries(o)
    else:
        images, _, ids = load_images(o)
    desc = describe(params, images, o)
    save_db(build_db(zip(ids, desc)), o["out"])
    print("wrote %d x %d descriptors to %s" % (len(ids), desc.shape[1], o["out"]))


def cmd_whiten(o):
    db = load_db(o["db"])
    try:
        w = fit_whitener(db.matrix, o["out_dim"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    save_whitener(w, o["out"])
    print("whitener %d -> %d written to %s" % (w.in_dim, w.out_dim, o["out"]))


def cmd_index(o):
    db = load_db(o["db"])
    w = load_whitener(o["whitener"])
    save_db(build_db(zip(db.ids, postprocess(w, db.matrix))), o["out"])
    print("indexed %d descriptors (dim %d) to %s" % (db.n, w.out_dim, o["out"]))


def cmd_query(o):
    db = load_db(o["db"])
    queries = load_db(o["queries"])
    rankings = [query(db, q, o["k"], qid) for qid, q in zip(queries.ids, queries.matrix)]
    write_rankings(rankings, o["out"])
    print("ranked %d queries against %d images into %s" % (len(rankings), db.n, o["out"]))


def cmd_eval(o):
    ranked = read_rankings(o["ranked"])
    names = data_mod.list_queries(o["gt"])
    if not names:
        raise DataError("no ground-truth queries in %s" % o["gt"])
    pairs = []
    for name in names:
        if name not in ranked:
            raise DataError("no ranked list for query %s" % name)
        pairs.append((ranked[name], data_mod.parse_ground_truth(o["gt"], name)))
    report = format_report(pairs)
    if o["out"]:
        with open(o["out"], "w") as fh:
            fh.write(report)
    sys.stdout.write(report)


def train_config(o):
    try:
        return TrainConfig(batch_size=o["batch_size"], steps=o["steps"], seed=o["seed"],
                           temperature=o["temperature"], ap_bins=o["ap_bins"], lr=o["lr"],
                           pooling=aggregator_config(o))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_trace(o, trace):
    if o["trace"]:
        with open(o["trace"], "w") as fh:
            fh.writelines("%d\t%.6f\n" % (i + 1, v) for i, v in enumerate(trace))


def cmd_train(o):
    cfg = train_config(o)
    images, _, _ = load_images(o)
    params = load_checkpoint(o["checkpoint"]) if o["checkpoint"] else None
    params, trace = train_contrastive(cfg, np.stack([fit_size(i) for i in images]), params)
    save_checkpoint(params, o["out"])
    _write_trace(o, trace)
    print("trained %d steps, loss %.6f -> %.6f" % (len(trace), trace[0], trace[-1]))


def cmd_finetune(o):
    cfg = train_config(o)
    images, labels, _ = load_images(o)
    params, trace = finetune_ap(cfg, np.stack([fit_size(i) for i in images]), labels,
                                load_checkpoint(o["checkpoint"]))
    save_checkpoint(params, o["out"])
    _write_trace(o, trace)
    print("fine-tuned %d steps, AP loss %.6f -> %.6f" % (len(trace), trace[0], trace[-1]))


def cmd_gradcheck(o):
    worst, checked, skipped = run_suite(o["seed"], trials=o["trials"])
    for name, err in worst.items():
        print("%s\t%.3e" % (name, err))
    print("encoder_coords_checked\t%d\nencoder_coords_skipped_at_kinks\t%d" % (checked, skipped))
    top = max(worst.values())
    print("max_rel_err\t%.3e" % top)
    if top > 1e-3:
        raise DataError("gradient check failed: max relative error %.3e > 1e-3" % top)


def _split(o):
    images, labels, ids = load_images(o)
    ds = Dataset(np.stack([fit_size(i) for i in images]), labels, ids)
    return make_split(ds, o["queries_per_instance"])


def _emit(o, header, rows):
    text = header + "\n" + "".join("%s\t%.6f\n" % row for row in rows)
    if o["out"]:
        with open(o["out"], "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_ablate_agg(o):
    base = aggregator_config(o, "GeM")
    results = ablate_aggregators(load_params(o), _split(o), o["out_dim"], base)
    _emit(o, "aggregator\tmAP", [(k, results[k]) for k in KINDS])


def cmd_ablate_dim(o):
    try:
        dims = [int(d) for d in o["dims"].split(",") if d.strip()]
    except ValueError:
        raise UsageError("--dims must be a comma-separated list of integers") from None
    results = ablate_dims(load_params(o), _split(o), dims, aggregator_config(o))
    _emit(o, "out_dim\tmAP", sorted(results.items()))


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "whiten": cmd_whiten,
    "index": cmd_index,
    "query": cmd_query,
    "eval": cmd_eval,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "gradcheck": cmd_gradcheck,
    "ablate-agg": cmd_ablate_agg,
    "ablate-dim": cmd_ablate_dim,
}


def thread_limit():
    raw = os.environ.get("IRET_THREADS")
    if raw is None:
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise UsageError("IRET_THREADS must be a positive integer, got %r" % raw)
    return int(raw)


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
            active = sub.choices.get(args.command, parser)
            active.error("unrecognized arguments: %s" % " ".join(extra))
        if not args.command:
            raise UsageError("missing subcommand (one of %s)" % " ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve(args)
        limit = thread_limit()
        if limit is None:
            COMMANDS[args.command](opts)
        else:
            with threadpool_limits(limits=limit):
                COMMANDS[args.command](opts)
    except SystemExit as exc:
        return exc.code
    except UsageError as exc:
        print("error:%s:%s" % (exc.code, exc), file=sys.stderr)
        return 1
    except IretError as exc:
        print("error:%s:%s" % (exc.code, exc), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print("error:data:%s" % str(exc).replace("\n", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
