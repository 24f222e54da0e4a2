"""Command line: ``lstmt gen-toy | train | caption | eval``.

Configuration is layered: built-in defaults, then ``--config FILE`` (JSON
with ``model``, ``train``, ``decode``, ``toy`` and ``data`` sections plus a
top-level ``seed``), then ``--set section.key=value``, then dedicated flags.
The resolved configuration is printed as one ``config {...}`` line before
any work; that JSON can be fed back through ``--config`` to rerun.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import fields
from pathlib import Path

from .data import (
    Checkpoint,
    build_vocab,
    gen_toy_corpus,
    load_captions,
    load_checkpoint,
    load_features,
    read_jsonl,
    save_captions,
    save_checkpoint,
    save_features,
)
from .decoding import DecodeConfig, Proposal, caption_events, greedy_decode, slice_event
from .errors import ConfigError, ContractError, DataError, LstmtError, NumericalError
from .metrics import EvalPair, evaluate
from .model import STREAMS, Captioner, ModelConfig, init_params
from .training import TrainConfig, build_examples, make_reward, scst_finetune, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# d_v and vocab_size default to None: taken from the data at train time
_MODEL_DEFAULTS = {f.name: f.default for f in fields(ModelConfig)} | {"d_v": None, "vocab_size": None}

DEFAULTS = {
    "seed": 0,
    "model": _MODEL_DEFAULTS,
    "train": {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"},
    "decode": {f.name: f.default for f in fields(DecodeConfig)},
    "toy": {"videos": 20, "vocab_size": 30, "k_min": 4, "k_max": 8, "d_v": 8},
    "data": {"min_count": 1},
}

# settings under which the generated toy corpus is memorised (written by gen-toy)
TOY_TRAINING = {
    "model": {"d_h": 32, "d_a": 16, "d_e": 16, "max_caption_len": 12},
    "train": {"learning_rate": 0.01, "batch_size": 4, "epochs": 150},
    "decode": {"beam_width": 1, "max_len": 12},
}


# ------------------------------------------------------------- config

def _coerce(section, key, value, default):
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{section}.{key} must be an integer or null, got {value!r}")
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(value, kind):
        return value
    raise ConfigError(f"{section}.{key} expects {kind.__name__}, got {value!r}")


def merge(base: dict, update: dict, origin: str) -> dict:
    """Overlay ``update`` on ``base`` after checking every key exists."""
    out = copy.deepcopy(base)
    for key, val in update.items():
        if key == "seed":
            out["seed"] = _coerce("", "seed", val, 0)
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown section {key!r}")
        if not isinstance(val, dict):
            raise ConfigError(f"{origin}: section {key!r} must be an object")
        for k, v in val.items():
            if k not in DEFAULTS[key]:
                raise ConfigError(f"{origin}: unknown key {key}.{k}")
            out[key][k] = _coerce(key, k, v, DEFAULTS[key][k])
    return out


def parse_set(items) -> dict:
    update: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key == "seed":
            update["seed"] = value
            continue
        section, dot, name = key.partition(".")
        if not dot:
            raise ConfigError(f"--set key must look like section.name, got {key!r}")
        update.setdefault(section, {})[name] = value
    return update


def resolve_config(config_path=None, sets=None, flags=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}:{e.lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        cfg = merge(cfg, loaded, str(config_path))
    cfg = merge(cfg, parse_set(sets), "--set")
    return merge(cfg, flags or {}, "flags")


def train_config(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def decode_config(cfg) -> DecodeConfig:
    return DecodeConfig(**cfg["decode"])


def echo(cfg, out):
    print("config " + json.dumps(cfg, sort_keys=True), file=out, flush=True)


# ----------------------------------------------------------- commands

def cmd_gen_toy(args, cfg, out):
    toy_cfg = cfg["toy"]
    toy = gen_toy_corpus(cfg["seed"], toy_cfg["videos"], toy_cfg["vocab_size"],
                         (toy_cfg["k_min"], toy_cfg["k_max"]), toy_cfg["d_v"])
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    save_features(dest / "features.jsonl", toy.features["rgb"] + toy.features["flow"])
    save_captions(dest / "captions.jsonl", {k: [v] for k, v in toy.captions.items()})
    suggested = {"seed": cfg["seed"], **copy.deepcopy(TOY_TRAINING)}
    (dest / "config.json").write_text(json.dumps(suggested, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(toy.captions)} videos to {dest}", file=out)
    return EXIT_OK


def _model_config(cfg, d_v, vocab_size) -> ModelConfig:
    m = dict(cfg["model"])
    for key, found in (("d_v", d_v), ("vocab_size", vocab_size)):
        if m[key] is None:
            m[key] = found
        elif m[key] != found:
            raise DataError(f"model.{key} is {m[key]} but the data implies {found}")
    return ModelConfig(**m)


def cmd_train(args, cfg, out):
    tcfg = train_config(cfg)
    seqs = load_features(args.features)
    captions = load_captions(args.captions)
    stream_seqs = [s for s in seqs if s.stream == args.stream]
    if not stream_seqs:
        raise DataError(f"{args.features}: no {args.stream!r} features")
    vocab = build_vocab([c for refs in captions.values() for c in refs], cfg["data"]["min_count"])
    examples = build_examples(stream_seqs, captions, vocab)
    mcfg = _model_config(cfg, stream_seqs[0].d_v, len(vocab))
    params = init_params(mcfg, seed=cfg["seed"])

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def log(rec):
        line = f"stream={args.stream} " + rec.line()
        print(line, file=out, flush=True)
        if log_fh:
            log_fh.write(line + "\n")

    try:
        _, history = train(params, examples, tcfg, stream=args.stream, log=log)
        if tcfg.scst_enabled and tcfg.scst_epochs > 0:
            reward = make_reward(tcfg.scst_reward, vocab, [ex.references for ex in examples])
            _, extra = scst_finetune(params, examples, tcfg, reward, args.stream, mcfg.max_caption_len, log)
            history = history + extra
    finally:
        if log_fh:
            log_fh.close()

    xe = [r for r in history if r.split == "train"]
    meta = {
        "epoch": len(xe),
        "loss": xe[-1].loss if xe else None,
        "seed": cfg["seed"],
        "stream": args.stream,
        "train": tcfg.to_dict(),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, Checkpoint(mcfg, params.snapshot(), vocab, meta))
    if args.figures and history:
        from .plotting import plot_loss_curve

        plot_loss_curve(history, Path(args.figures) / f"loss_{args.stream}.png", f"{args.stream} stream")
    print(f"wrote checkpoint {args.out}", file=out)
    return EXIT_OK


def _load_models(paths):
    ckpts = [load_checkpoint(p) for p in paths]
    vocab = ckpts[0].vocab
    for p, c in zip(paths[1:], ckpts[1:]):
        if c.vocab != vocab:
            raise ConfigError(f"{p}: vocabulary differs from {paths[0]}; fused models must share one")
    models = [Captioner(c.config, c.captioner_params(), c.meta.get("stream")) for c in ckpts]
    return models, vocab


def _load_proposals(path):
    props: dict[str, list[tuple[float, float, float | None]]] = {}
    for lineno, obj in read_jsonl(path):
        try:
            vid = obj["video_id"]
            t0, t1 = float(obj["t_start"]), float(obj["t_end"])
            dur = obj.get("duration")
            dur = None if dur is None else float(dur)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad proposal record ({e})", path, lineno) from None
        if t1 < t0:
            raise DataError("t_end precedes t_start", path, lineno)
        props.setdefault(vid, []).append((t0, t1, dur))
    return props


def cmd_caption(args, cfg, out):
    dcfg = decode_config(cfg)
    models, vocab = _load_models(args.model)
    seqs = load_features(args.features)
    by_video: dict[str, dict] = {}
    for s in seqs:
        by_video.setdefault(s.video_id, {})[s.stream] = s
    streams = [m.stream or STREAMS[0] for m in models]

    def feats_for(vid):
        have = by_video.get(vid)
        if have is None:
            raise DataError(f"{args.features}: no features for video {vid!r}")
        missing = [s for s in streams if s not in have]
        if missing:
            raise DataError(f"{args.features}: video {vid!r} lacks stream(s) {missing}")
        return [have[s] for s in streams]

    if args.proposals:
        wanted = _load_proposals(args.proposals)
    else:
        wanted = {vid: None for vid in by_video}

    lines = []
    for vid, spans in wanted.items():
        feats = feats_for(vid)
        if spans is None:
            K = feats[0].K
            props = [Proposal(0.0, float(K), feats)]
        else:
            props = [Proposal(t0, t1, [slice_event(f, t0, t1, d) for f in feats]) for t0, t1, d in spans]
        events = caption_events(models, props, dcfg, vocab)
        lines.append(json.dumps({"video_id": vid, "events": events}, sort_keys=True))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"wrote captions for {len(lines)} videos to {args.out}", file=out)

    if args.figures and wanted:
        from .plotting import plot_attention

        vid = next(iter(wanted))
        feats = feats_for(vid)
        res = greedy_decode(models, feats, DecodeConfig(1, dcfg.max_len, dcfg.length_norm, dcfg.fusion))
        words = [vocab.tokens[t] for t in res.tokens]
        for k, stream in enumerate(streams):
            weights = [step[k] for step in res.attention]
            plot_attention(weights, words, Path(args.figures) / f"attention_{vid}_{stream}.png",
                           f"{vid} ({stream})")
    return EXIT_OK


def _read_candidates(path):
    """``{id: caption}`` from caption lines or dense-caption lines.

    Dense-caption events become ids ``video_id#k`` sharing the video's
    references; events without a caption are skipped.
    """
    cands: dict[str, tuple[str, str]] = {}
    for lineno, obj in read_jsonl(path):
        if not isinstance(obj, dict) or "video_id" not in obj:
            raise DataError("record needs a video_id", path, lineno)
        vid = obj["video_id"]
        if "events" in obj:
            for k, ev in enumerate(obj["events"]):
                if ev.get("caption") is not None:
                    cands[f"{vid}#{k}"] = (vid, ev["caption"])
        elif isinstance(obj.get("caption"), str):
            if vid in cands:
                raise DataError(f"duplicate candidate for {vid!r}", path, lineno)
            cands[vid] = (vid, obj["caption"])
        else:
            raise DataError("record needs a caption string or an events list", path, lineno)
    if not cands:
        raise DataError(f"{path}: no candidate captions")
    return cands


def _read_pairs(path):
    pairs = []
    for lineno, obj in read_jsonl(path):
        try:
            pairs.append(EvalPair(str(obj["id"]), obj["candidate"], tuple(obj["references"])))
        except (KeyError, TypeError) as e:
            raise DataError(f"bad pair record ({e})", path, lineno) from None
        except ContractError as e:
            raise DataError(str(e), path, lineno) from None
    if not pairs:
        raise DataError(f"{path}: no evaluation pairs")
    return pairs


def eval_pairs(candidates_path, references_path):
    cands = _read_candidates(candidates_path)
    refs = load_captions(references_path)
    cand_videos = {vid for vid, _ in cands.values()}
    missing_refs = sorted(cand_videos - set(refs))
    missing_cands = sorted(set(refs) - cand_videos)
    if missing_refs or missing_cands:
        parts = []
        if missing_cands:
            parts.append(f"no candidate for {', '.join(missing_cands)}")
        if missing_refs:
            parts.append(f"no reference for {', '.join(missing_refs)}")
        raise DataError("id mismatch between candidates and references: " + "; ".join(parts))
    return [EvalPair(cid, cap, tuple(refs[vid])) for cid, (vid, cap) in cands.items()]


def _named(arg):
    name, sep, path = arg.partition("=")
    return (name, path) if sep and name else (Path(arg).stem, arg)


def cmd_eval(args, cfg, out):
    reports = {}
    if args.pairs:
        reports[Path(args.pairs).stem] = evaluate(_read_pairs(args.pairs))
    if args.candidates:
        if not args.references:
            raise ConfigError("--candidates needs --references")
        for arg in args.candidates:
            name, path = _named(arg)
            if name in reports:
                raise ConfigError(f"duplicate model name {name!r}")
            reports[name] = evaluate(eval_pairs(path, args.references))
    if not reports:
        raise ConfigError("eval needs --pairs or --candidates")

    width = max(5, *(len(n) for n in reports))
    head = "Model".ljust(width) + "".join(f" | {c:>7}" for c in next(iter(reports.values())).COLUMNS)
    print(head, file=out)
    print("-" * len(head), file=out)
    for name, rep in reports.items():
        print(name.ljust(width) + "".join(f" | {v:7.2f}" for v in rep.percent().values()), file=out)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            for name, rep in reports.items():
                fh.write(json.dumps({"model": name, **json.loads(rep.to_json())}, sort_keys=True) + "\n")
    if args.figures:
        from .plotting import plot_metrics

        plot_metrics(reports, Path(args.figures) / "metrics.png")
    return EXIT_OK


# -------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Usage(f"{self.prog}: {message}")


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.epochs=5")
    common.add_argument("--seed", type=int, help="seed for every random choice")

    p = _Parser(prog="lstmt", description="Temporal-attention LSTM video captioner")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-toy", parents=[common], help="write a synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--videos", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--d-v", type=int)

    t = sub.add_parser("train", parents=[common], help="train one stream's captioner")
    t.add_argument("--features", required=True)
    t.add_argument("--captions", required=True)
    t.add_argument("--stream", choices=STREAMS, default="rgb")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--log", help="also append epoch lines to this file")
    t.add_argument("--figures", help="directory for the loss curve")

    c = sub.add_parser("caption", parents=[common], help="caption videos or proposals")
    c.add_argument("--model", action="append", required=True, help="checkpoint; repeat to fuse two")
    c.add_argument("--features", required=True)
    c.add_argument("--proposals", help="JSON Lines of {video_id, t_start, t_end[, duration]}")
    c.add_argument("--out", required=True)
    c.add_argument("--beam-width", type=int)
    c.add_argument("--max-len", type=int)
    c.add_argument("--figures", help="directory for attention heatmaps")

    e = sub.add_parser("eval", parents=[common], help="score captions")
    e.add_argument("--candidates", action="append", metavar="[NAME=]PATH",
                   help="caption or dense-caption JSON Lines; repeat to compare models")
    e.add_argument("--references", help="caption JSON Lines")
    e.add_argument("--pairs", help="JSON Lines of {id, candidate, references}")
    e.add_argument("--out", help="write one JSON report line per model")
    e.add_argument("--figures", help="directory for the metric bar chart")
    return p


def _flag_overrides(args) -> dict:
    flags: dict = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    pairs = {
        ("toy", "videos"): getattr(args, "videos", None),
        ("toy", "vocab_size"): getattr(args, "vocab_size", None),
        ("toy", "d_v"): getattr(args, "d_v", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("decode", "beam_width"): getattr(args, "beam_width", None),
        ("decode", "max_len"): getattr(args, "max_len", None),
    }
    for (section, key), val in pairs.items():
        if val is not None:
            flags.setdefault(section, {})[key] = val
    return flags


COMMANDS = {"gen-toy": cmd_gen_toy, "train": cmd_train, "caption": cmd_caption, "eval": cmd_eval}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.set, _flag_overrides(args))
        # the dataclasses validate value ranges before anything runs
        train_config(cfg)
        decode_config(cfg)
        echo(cfg, out)
        return COMMANDS[args.command](args, cfg, out)
    except _Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LstmtError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
