"""Command-line interface: ``osqapg synth|train|enhance|evaluate``.

Every option can also come from a ``key = value`` config file passed with
``--config``; keys are the long option names with dashes or underscores.
Precedence is flag > config file > default. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import data, dsp, nn, pipeline
from .masks import PostProcessConfig
from .policy import PGConfig
from .scorers import DEFAULT_TIMEOUT, ScorerError, make_scorer

log = logging.getLogger("osqapg")

# documented defaults; per-command parsers only see the keys they declare
DEFAULTS = {
    # synth
    "n": 32,
    "duration": 2.0,
    "snrs": "-6,0,6,12",
    "prefix": "utt",
    # shared
    "seed": 0,
    "sample_rate": dsp.SAMPLE_RATE,
    # network and supervised training
    "hidden": "1024,1024,1024",
    "Q": dsp.CONTEXT,
    "n_mels": dsp.N_MELS,
    "step_size": 1e-4,
    "dropout_in": 0.2,
    "dropout_hidden": 0.5,
    "l2": 1e-4,
    "c_sigma": nn.C_SIGMA,
    "batch_size": 4,
    "val_fraction": 0.1,
    # policy gradient
    "pg_step_size": 1e-6,
    "K": 20,
    "I": 10,
    "epsilon": 0.05,
    "lambda": 0.05,
    "val_every": 10,
    "pg_dropout": False,
    "remix": False,
    "workers": 1,
    "scorer": "sdr",
    "scorer_timeout": DEFAULT_TIMEOUT,
    # post-processing
    "g_min": 0.158,
    "beta": 0.3,
}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value, default):
    if isinstance(value, str) and default is not None and not isinstance(default, str):
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise UsageError(f"not a boolean: {value!r}")
            return low in ("1", "true", "yes", "on")
        try:
            return type(default)(value)
        except ValueError:
            raise UsageError(f"cannot parse {value!r} as {type(default).__name__}") from None
    return value


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill options left unset on the command line from config, then defaults."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    declared = set(vars(args))
    unknown = set(cfg) - declared
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in declared:
        if getattr(args, key) is not None:
            continue
        default = DEFAULTS.get(key)
        if key in cfg:
            setattr(args, key, _coerce(cfg[key], default))
        else:
            setattr(args, key, default)
    return args


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _floats(text))


def echo_config(args: argparse.Namespace) -> None:
    for key in sorted(vars(args)):
        if key != "func":
            log.info("config %s = %s", key, getattr(args, key))


def _bool_flag(p, name, help):
    p.add_argument(name, action="store_const", const=True, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osqapg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus and its manifest")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--snrs")
    p.add_argument("--prefix")
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="ML / MMSE pre-training or policy-gradient fine-tuning")
    p.add_argument("--mode", required=True, choices=["ml", "mmse", "pg"])
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--init", type=Path, help="starting checkpoint (required for pg)")
    p.add_argument("--val-manifest", type=Path)
    p.add_argument("--log", type=Path, help="CSV log (default: <out>.log.csv)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--updates", type=int)
    p.add_argument("--hidden")
    p.add_argument("--Q", type=int)
    p.add_argument("--n-mels", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--dropout-in", type=float)
    p.add_argument("--dropout-hidden", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--c-sigma", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--pg-step-size", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--I", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--val-every", type=int)
    _bool_flag(p, "--pg-dropout", "keep dropout active during policy-gradient updates")
    _bool_flag(p, "--remix", "draw fresh clean/noise/SNR combinations for every PG utterance")
    p.add_argument("--workers", type=int)
    p.add_argument("--scorer", choices=["sdr", "bandcorr", "mix", "pesq", "stoi"])
    p.add_argument("--scorer-ext", help="external scorer endpoint, cmd:<command> or tcp:<host>:<port>")
    p.add_argument("--scorer-timeout", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance WAV files with a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("inputs", nargs="+", type=Path)
    _bool_flag(p, "--no-postprocess", "use the raw MAP mask")
    _bool_flag(p, "--identity-mask", "debug: apply a mask of ones")
    p.add_argument("--g-min", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="per-utterance metric table for a manifest")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="CSV output")
    _bool_flag(p, "--no-postprocess", "use the raw MAP mask")
    _bool_flag(p, "--identity-mask", "debug: apply a mask of ones")
    p.add_argument("--g-min", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--scorer-ext", help="external scorer endpoint, cmd:<command> or tcp:<host>:<port>")
    p.add_argument("--scorer-ext-name", default=None, help="CSV column prefix for the external score")
    p.add_argument("--scorer-timeout", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)
    return parser


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = data.generate_corpus(args.n, args.seed, _floats(args.snrs), args.out,
                                    args.duration, args.sample_rate, args.prefix)
    print(args.out / "manifest.txt")
    log.info("wrote %d utterances", len(manifest))
    return 0


def _load_prepared(path, fe: pipeline.FrontEnd) -> list[pipeline.Prepared]:
    manifest = data.load_manifest(path)
    if manifest.sample_rate != fe.sample_rate:
        raise ValueError(f"{path}: manifest is {manifest.sample_rate} Hz, model expects {fe.sample_rate} Hz")
    return [pipeline.prepare(u, fe) for u in data.load_corpus(manifest)]


def _read_checkpoint(path):
    return nn.load_checkpoint(Path(path).read_bytes())


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _split_val(train, args):
    if args.val_manifest is not None:
        return train, None
    n_val = max(1, int(round(args.val_fraction * len(train)))) if args.val_fraction > 0 else 0
    if n_val >= len(train):
        raise UsageError("validation split leaves no training utterances")
    return (train[: len(train) - n_val], train[len(train) - n_val:]) if n_val else (train, [])


def cmd_train(args) -> int:
    if args.mode == "pg" and args.init is None:
        raise UsageError("pg mode requires an ML checkpoint (--init)")
    hyper = nn.TrainHyper(args.c_sigma, args.dropout_in, args.dropout_hidden, args.l2, args.step_size)
    if args.init is not None:
        params, stats, meta = _read_checkpoint(args.init)
        fe = pipeline.FrontEnd.from_meta(meta)
    else:
        rate = data.load_manifest(args.manifest).sample_rate
        fe = pipeline.FrontEnd(n_mels=args.n_mels, Q=args.Q, sample_rate=rate)
        params, stats, meta = None, None, {}
    train = _load_prepared(args.manifest, fe)
    train, val = _split_val(train, args)
    if args.val_manifest is not None:
        val = _load_prepared(args.val_manifest, fe)
    if stats is None:
        stats = pipeline.feature_stats(train)
    log_path = args.log or args.out.with_name(args.out.name + ".log.csv")
    t0 = time.perf_counter()

    if args.mode in ("ml", "mmse"):
        if params is None:
            dims = nn.NetworkDims(fe.n_in, _ints(args.hidden), fe.n_mels)
            params = nn.init_params(dims, args.seed)
            params = pipeline.init_variance_bias(params, train, fe, hyper.c_sigma)
        updates = args.updates if args.updates is not None else 10 ** 9
        params, history = pipeline.train_supervised(
            params, train, val or None, stats, fe, hyper, args.mode, updates, args.batch_size, args.seed,
            on_epoch=lambda r: log.info("epoch %(epoch)d updates %(updates)d train %(train_loss).6g "
                                        "val %(val_loss).6g step %(step_size).3g %(event)s", r))
        header = ["epoch", "updates", "train_loss", "val_loss", "step_size", "event"]
        _write_csv(log_path, header, [[r[k] for k in header] for r in history])
    else:
        scorer = make_scorer(args.scorer, args.scorer_ext, args.scorer_timeout)
        cfg = PGConfig(K=args.K, I=args.I, epsilon=args.epsilon, lam=getattr(args, "lambda"),
                       step_size=args.pg_step_size, seed=args.seed,
                       updates=args.updates if args.updates is not None else 200,
                       dropout=args.pg_dropout, workers=args.workers)
        rows = []

        def on_update(rec, elapsed):
            rows.append(rec.row(elapsed))

        def on_validate(update, score):
            log.info("validation update %d mean MAP score %.4f", update, score)
            rows.append([update, "", "", "", "", time.perf_counter() - t0, score])

        try:
            params, _ = pipeline.train_pg(params, train, stats, fe, scorer, cfg, hyper, val or None,
                                          args.val_every, on_update, on_validate, args.remix)
        finally:
            scorer.close()
        _write_csv(log_path, ["update", "map_score", "cand_score", "adv_var", "mse", "seconds",
                              "val_score"], [r + [""] * (7 - len(r)) for r in rows])

    meta = {**meta, **fe.meta(), "mode": args.mode, "seed": args.seed}
    args.out.write_bytes(nn.save_checkpoint(params, stats, meta))
    log.info("wrote %s and %s in %.1f s", args.out, log_path, time.perf_counter() - t0)
    return 0


def _post_cfg(args):
    return None if args.no_postprocess else PostProcessConfig(args.g_min, args.beta)


def cmd_enhance(args) -> int:
    params, stats, meta = _read_checkpoint(args.ckpt)
    fe = pipeline.FrontEnd.from_meta(meta)
    hyper = nn.TrainHyper()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    failed = 0
    for path in args.inputs:
        try:
            mixture = data.load_wav(path, fe.sample_rate)
            out = pipeline.enhance_waveform(params, stats, fe, hyper, mixture, _post_cfg(args),
                                            bool(args.identity_mask))
            data.save_wav(args.out_dir / Path(path).name, out)
            log.info("enhanced %s", path)
        except (OSError, ValueError) as exc:
            failed += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
    return 1 if failed else 0


def cmd_evaluate(args) -> int:
    params, stats, meta = _read_checkpoint(args.ckpt)
    fe = pipeline.FrontEnd.from_meta(meta)
    extra = {}
    if args.scorer_ext:
        from .scorers import external_scorer
        extra[args.scorer_ext_name or "ext"] = external_scorer(args.scorer_ext, None, args.scorer_timeout)
    try:
        rows = pipeline.evaluate(params, stats, fe, nn.TrainHyper(), _load_prepared(args.manifest, fe),
                                 _post_cfg(args), bool(args.identity_mask), extra)
    finally:
        for s in extra.values():
            s.close()
    header = list(rows[0])
    _write_csv(args.out, header, [[r[k] for k in header] for r in rows])
    log.info("wrote %s", args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        resolve(args)
        echo_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"osqapg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ScorerError, nn.CheckpointError) as exc:
        print(f"osqapg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
