"""Command-line entry point: gen-data, train, explain, counterfactual, report."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import cfeval, formats, pipeline, toyworld
from .diffmath import NumericError, ParameterError
from .ppim import PartLossConfig, PPIMError

log = logging.getLogger("partcf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pair(text: str) -> tuple[int, int]:
    a, sep, b = text.lower().partition("x")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}")
    return int(a), int(b)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser() -> tuple[_Parser, dict]:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="file of key=value lines; command-line flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="partcf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=24)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--grid", type=_pair, default=(4, 4))
    p.add_argument("--image-size", type=_pair, default=(32, 32))
    subs["gen-data"] = p

    p = sub.add_parser("train", parents=[common], help="train the toy encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=0.5)
    p.add_argument("--decay-every", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--hash-dim", type=int, default=128)
    p.add_argument("--phrases", type=int, default=6, help="phrase slots P")
    p.add_argument("--lambda-part", type=float, default=0.5)
    p.add_argument("--lambda-cov", type=float, default=0.1)
    p.add_argument("--tau-part", type=float, default=0.07)
    p.add_argument("--tau-tal", type=float, default=0.02)
    p.add_argument("--margin-tal", type=float, default=0.1)
    p.add_argument("--tau-base", type=float, default=0.07)
    p.add_argument("--warmup-epochs", type=int, default=5)
    subs["train"] = p

    p = sub.add_parser("explain", parents=[common], help="per-phrase heatmaps for a query/gallery pair")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--query", type=int, default=0)
    p.add_argument("--gallery", type=int, default=None, help="gallery index (default: top-1)")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--phrases", type=int, default=6)
    p.add_argument("--out", required=True)
    subs["explain"] = p

    p = sub.add_parser("counterfactual", parents=[common], help="rank-1 part removal protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--alpha", type=_floats, default=[0.3])
    p.add_argument("--p", type=_floats, default=[0.1])
    p.add_argument("--phrases", type=int, default=6)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    subs["counterfactual"] = p

    p = sub.add_parser("report", parents=[common], help="average sweep CSVs into curves")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    subs["report"] = p
    return parser, subs


def parse_args(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = subs[args.command]
        actions = {a.dest: a for a in sp._actions}
        values = {}
        for key, raw in read_config(args.config).items():
            if key not in actions or key in ("config", "help"):
                raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
            conv = actions[key].type or str
            try:
                values[key] = conv(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _load_eval(args):
    scenes, documents, meta = formats.read_dataset(args.data)
    params, pmeta = formats.read_params(args.params)
    grid = tuple(meta.get("grid", pmeta.get("grid", (4, 4))))
    return scenes, documents, params, grid


def cmd_gen_data(args):
    scenes, docs = toyworld.gen_dataset(args.identities, args.samples, args.grid, args.image_size, args.seed)
    formats.write_dataset(scenes, docs, args.out, grid=list(args.grid), image_size=list(args.image_size),
                          seed=args.seed, identities=args.identities, samples=args.samples)
    log.info("wrote %d scenes to %s", len(scenes), args.out)


def cmd_train(args):
    scenes, documents, meta = formats.read_dataset(args.data)
    grid = tuple(meta.get("grid", (4, 4)))
    phrases, mask, flagged = formats.ingest_phrases(documents, args.phrases)
    for i, why in flagged:
        log.warning("sample %d: %s", i, why)
    loss = PartLossConfig(args.tau_part, args.tau_tal, args.margin_tal, args.lambda_part, args.lambda_cov,
                          args.warmup_epochs, args.tau_base)
    cfg = toyworld.TrainConfig(loss, args.epochs, args.batch_size, args.lr, args.lr_decay, args.decay_every,
                               args.dim, args.hash_dim)
    data = toyworld.prepare(scenes, phrases, mask, grid, args.hash_dim)
    result = toyworld.train(data, cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_params(result.params, out / "params.json", grid=list(grid), seed=args.seed,
                         lambda_part=args.lambda_part, epochs=args.epochs)
    keys = ("epoch", "lr", "warmup", "total", "base", "part", "coverage")
    formats.write_rows(out / "loss_curve.csv", keys, [[r[k] for k in keys] for r in result.curve])
    batch = pipeline.encode_scenes(result.params, scenes, phrases, mask, grid)
    formats.write_embeddings(batch, out / "embeddings.ipaemb")
    log.info("final loss %.6f", result.curve[-1]["total"])


def cmd_explain(args):
    scenes, documents, params, grid = _load_eval(args)
    ev = pipeline.build_eval(params, scenes, documents, args.phrases, grid)
    n = ev.S.scores.shape[0]
    if not 0 <= args.query < n:
        raise UsageError(f"--query must lie in [0, {n})")
    j = cfeval.top1(ev.S, args.query) if args.gallery is None else args.gallery
    if not 0 <= j < n:
        raise UsageError(f"--gallery must lie in [0, {n})")
    spec = cfeval.MaskSpec(args.alpha, args.p)
    q = ev.queries[args.query]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m, phrase in enumerate(q.phrases):
        R = cfeval.relevance_map(q.phrase_embeddings[m], ev.batch.patches[j], grid, ev.images[j].shape[:2], phrase)
        mask = cfeval.part_mask(R, spec)
        formats.write_heatmap(R, out / f"heatmap_q{args.query}_g{j}_m{m}.pgm")
        formats.write_heatmap(mask.astype(np.float64), out / f"mask_q{args.query}_g{j}_m{m}.pgm")
        s_new = cfeval.counterfactual_similarity(q.embedding, cfeval.perturb(ev.images[j], mask), ev.encoder) \
            if mask.any() else float(ev.S.scores[args.query, j])
        rows.append([m, phrase, int(R.degenerate), int(mask.sum()), float(ev.S.scores[args.query, j]) - s_new])
    formats.write_rows(out / f"phrases_q{args.query}_g{j}.csv", ("index", "phrase", "degenerate", "masked_pixels", "delta_s"), rows)


def cmd_counterfactual(args):
    scenes, documents, params, grid = _load_eval(args)
    for a in args.alpha:
        cfeval.MaskSpec(a, 0.0)
    for p in args.p:
        cfeval.MaskSpec(0.0, p)
    ev = pipeline.build_eval(params, scenes, documents, args.phrases, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_embeddings(ev.batch, out / "embeddings.ipaemb")
    rows = []
    for a in args.alpha:
        for p in args.p:
            rep = pipeline.counterfactual(ev, a, p, args.workers)
            formats.write_report(rep, out / f"report_a{a:g}_p{p:g}.csv")
            rows.append([a, p] + [rep.delta_pct[m] for m in cfeval.METRICS])
            qrows = []
            for i, m in enumerate(rep.chosen_phrase):
                text = "" if m is None else ev.queries[i].phrases[m]
                qrows.append([i, rep.top1[i], text, rep.delta_s[i][m] if m is not None else 0.0])
            formats.write_rows(out / f"queries_a{a:g}_p{p:g}.csv", ("query", "top1", "rank1_phrase", "delta_s"), qrows)
            log.info("alpha=%g p=%g dR@1%%=%.4f", a, p, rep.delta_pct["R@1"])
    formats.write_rows(out / "sweep.csv", ["alpha", "p"] + [f"d{m}%" for m in cfeval.METRICS], rows)

def cmd_report(args):
    groups: dict = {}
    header = None
    for path in args.inputs:
        head, rows = formats.read_rows(path)
        if head[:2] != ["alpha", "p"]:
            raise formats.FormatError(f"{path}: not a sweep CSV")
        if header is None:
            header = head
        elif head != header:
            raise formats.FormatError(f"{path}: columns differ from {args.inputs[0]}")
        for row in rows:
            key = (float(row[0]), float(row[1]))
            groups.setdefault(key, []).append([float(x) for x in row[2:]])
    out_rows = []
    for (a, p), vals in sorted(groups.items()):
        arr = np.array(vals)
        out_rows.append([a, p, len(vals)] + [float(x) for x in arr.mean(axis=0)] + [float(x) for x in arr.std(axis=0)])
    cols = header[2:]
    formats.write_rows(args.out, ["alpha", "p", "runs"] + [f"{c}_mean" for c in cols] + [f"{c}_std" for c in cols], out_rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "explain": cmd_explain,
    "counterfactual": cmd_counterfactual,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if not args.verbose else "default")
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"partcf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"partcf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (formats.FormatError, PPIMError, OSError, KeyError, ValueError) as exc:
        print(f"partcf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
