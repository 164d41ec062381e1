"""Command-line pipeline: synth -> train -> extract -> backend -> score -> eval.

Every subcommand takes an optional plain-text config file ("key = value"
lines, "#" comments); flags override file values, unknown keys are rejected,
and the resolved values are echoed into the output directory for provenance.

Exit codes: 0 success, 2 usage or bad config, 3 training divergence,
4 unresolved data references, 1 anything else.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import backend as backend_mod
from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import trainer as trainer_mod
from .errors import (
    ConfigError,
    DataReferenceError,
    DivergenceError,
    ParseError,
    SpkembedError,
)
from .pooling import POOLING_KINDS, PoolingConfig

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_DATA_REFERENCE = 4


def read_config_file(path):
    """Parse "key = value" lines; returns a flat string-to-string dict."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'", lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ParseError(f"{path}:{lineno}: empty key or value", lineno)
        if key in values:
            raise ParseError(f"{path}:{lineno}: duplicate key {key!r}", lineno)
        values[key] = value
    return values


def _resolve(args, known_keys):
    """Merge config file and CLI flags; flags win.  Returns key -> string."""
    values = {}
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        unknown = sorted(set(file_values) - set(known_keys))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(file_values)
    for key in known_keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    return values


def _echo_config(out_dir, values):
    lines = [f"{key} = {values[key]}\n" for key in sorted(values)]
    (Path(out_dir) / "config_used.txt").write_text("".join(lines))


def _parse_tdnn_layers(text):
    layers = []
    for item in text.replace(";", " ").split():
        try:
            offsets, out_dim = item.split(":")
            layers.append((tuple(int(o) for o in offsets.split(",")), int(out_dim)))
        except ValueError:
            raise ConfigError(f"bad tdnn layer spec {item!r}, expected 'o1,o2,...:dim'") from None
    return tuple(layers)


_SYNTH_KEYS = {
    "num_speakers": int,
    "utts_per_speaker": int,
    "frames_min": int,
    "frames_max": int,
    "dim": int,
    "speaker_mean_scale": float,
    "speaker_logstd_scale": float,
    "filler_prob": float,
    "seed": int,
}

_TRAIN_KEYS = {
    "input_dim": int,
    "tdnn_layers": _parse_tdnn_layers,
    "attention_hidden": int,
    "utterance_layers": lambda s: tuple(int(w) for w in s.split(",")),
    "pooling_kind": str,
    "variance_floor": float,
    "network_seed": int,
    "chunk_frames": int,
    "batch_size": int,
    "epochs": int,
    "optimizer": str,
    "learning_rate": float,
    "lr_decay": float,
    "train_seed": int,
}


def _typed(values, types):
    out = {}
    for key, value in values.items():
        try:
            out[key] = types[key](value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out


def cmd_synth(args):
    raw = _resolve(args, _SYNTH_KEYS)
    values = _typed(raw, _SYNTH_KEYS)
    kwargs = {k: v for k, v in values.items() if k not in ("frames_min", "frames_max")}
    if "frames_min" in values or "frames_max" in values:
        kwargs["frames_range"] = (
            values.get("frames_min", corpus_mod.SynthConfig.frames_range[0]),
            values.get("frames_max", corpus_mod.SynthConfig.frames_range[1]),
        )
    cfg = corpus_mod.SynthConfig(**kwargs)
    out_dir = corpus_mod.ensure_dir(args.out)
    entries = corpus_mod.synth_generate(cfg, out_dir)
    _echo_config(out_dir, raw)
    print(f"wrote {len(entries)} utterances to {out_dir}")
    return EXIT_OK


def cmd_train(args):
    raw = _resolve(args, _TRAIN_KEYS)
    if args.seed is not None:
        raw.setdefault("network_seed", str(args.seed))
        raw.setdefault("train_seed", str(args.seed))
    values = _typed(raw, _TRAIN_KEYS)
    entries = corpus_mod.load_manifest(args.manifest)
    if not entries:
        raise ConfigError("empty manifest")
    feature_dim = corpus_mod.read_features(entries[0].path).shape[1]
    if values.get("input_dim", feature_dim) != feature_dim:
        raise ConfigError(
            f"config input_dim={values['input_dim']} but features have dim {feature_dim}"
        )
    if "pooling_kind" in values and values["pooling_kind"] != args.pooling:
        raise ConfigError("--pooling and config pooling_kind disagree")
    pooling = PoolingConfig(
        kind=args.pooling, variance_floor=values.get("variance_floor", 1e-12)
    )
    net_kwargs = {
        "input_dim": feature_dim,
        "num_speakers": len({e.speaker_id for e in entries}),
        "pooling": pooling,
        "seed": values.get("network_seed", 0),
    }
    for key in ("tdnn_layers", "attention_hidden", "utterance_layers"):
        if key in values:
            net_kwargs[key] = values[key]
    net_cfg = model_mod.NetworkConfig(**net_kwargs)
    train_kwargs = {
        key: values[key]
        for key in ("chunk_frames", "batch_size", "epochs", "optimizer", "learning_rate", "lr_decay")
        if key in values
    }
    train_cfg = trainer_mod.TrainConfig(seed=values.get("train_seed", 0), **train_kwargs)

    out_dir = corpus_mod.ensure_dir(args.out)
    net = model_mod.build_network(net_cfg)
    trainer_mod.train(net, entries, train_cfg, out_dir=out_dir, verbose=not args.quiet)
    raw["pooling_kind"] = pooling.kind
    _echo_config(out_dir, raw)
    return EXIT_OK


def cmd_extract(args):
    net = model_mod.load_checkpoint(args.model)
    entries = corpus_mod.load_manifest(args.manifest)
    out_dir = corpus_mod.ensure_dir(args.out)
    emb_dir = corpus_mod.ensure_dir(out_dir / "emb")
    kept = []
    skipped = []
    for entry in entries:
        frames = corpus_mod.read_features(entry.path)
        try:
            embedding = model_mod.extract_embedding(net, frames)
        except SpkembedError as exc:
            print(f"warning: skipping {entry.utt_id}: {exc}", file=sys.stderr)
            skipped.append(f"{entry.utt_id} {exc}\n")
            continue
        rel_path = Path("emb") / f"{entry.utt_id}.aspf"
        corpus_mod.write_features(out_dir / rel_path, embedding[None, :])
        kept.append(corpus_mod.ManifestEntry(entry.utt_id, entry.speaker_id, rel_path))
    corpus_mod.write_manifest(out_dir / "embeddings.txt", kept)
    (out_dir / "skipped.txt").write_text("".join(skipped))
    print(f"extracted {len(kept)} embeddings ({len(skipped)} skipped) to {out_dir}")
    return EXIT_OK


def _load_embeddings(manifest_path):
    entries = corpus_mod.load_manifest(manifest_path)
    vectors = {}
    speakers = {}
    for entry in entries:
        vectors[entry.utt_id] = corpus_mod.read_features(entry.path)[0]
        speakers[entry.utt_id] = entry.speaker_id
    return vectors, speakers


def cmd_backend(args):
    vectors, speakers = _load_embeddings(args.embeddings)
    if args.labels:
        speakers = {}
        for lineno, raw in enumerate(Path(args.labels).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{args.labels}:{lineno}: expected 'utt speaker'", lineno)
            speakers[parts[0]] = parts[1]
        missing = sorted(set(vectors) - set(speakers))
        if missing:
            raise DataReferenceError(
                f"{len(missing)} embeddings lack labels", missing_ids=missing
            )
    utt_ids = sorted(vectors)
    stacked = np.array([vectors[u] for u in utt_ids])
    transform = backend_mod.fit_backend_transform(stacked)
    transformed = np.array([backend_mod.apply_backend_transform(transform, v) for v in stacked])
    labels = [speakers[u] for u in utt_ids]
    plda = backend_mod.plda_fit(transformed, labels, iters=args.plda_iters)
    out_dir = corpus_mod.ensure_dir(args.out)
    backend_mod.save_backend(out_dir / "backend.aspb", transform, plda)
    print(f"fitted backend on {len(utt_ids)} embeddings from {len(set(labels))} speakers")
    return EXIT_OK


def cmd_score(args):
    transform, plda = backend_mod.load_backend(args.backend)
    trials = corpus_mod.parse_trials(args.trials)
    enroll_vectors, _ = _load_embeddings(args.enroll)
    test_vectors, _ = _load_embeddings(args.test)
    missing = []
    for trial in trials:
        missing.extend(u for u in trial.enroll_ids if u not in enroll_vectors)
        if trial.test_id not in test_vectors:
            missing.append(trial.test_id)
    if missing:
        raise DataReferenceError(
            f"{len(set(missing))} trial ids missing from embeddings",
            missing_ids=sorted(set(missing)),
        )
    scored = []
    for trial in trials:
        # Multi-session enrollment averages raw embeddings before the backend.
        enroll_raw = np.mean([enroll_vectors[u] for u in trial.enroll_ids], axis=0)
        enroll = backend_mod.apply_backend_transform(transform, enroll_raw)
        test = backend_mod.apply_backend_transform(transform, test_vectors[trial.test_id])
        if args.method == "plda":
            score = backend_mod.plda_score(plda, enroll, test)
        else:
            score = backend_mod.cosine_score(enroll, test)
        scored.append((",".join(trial.enroll_ids), trial.test_id, score))
    scored.sort(key=lambda item: (item[0], item[1]))
    metrics_mod.write_scores(args.out, scored)
    print(f"scored {len(scored)} trials with {args.method}")
    return EXIT_OK


def cmd_eval(args):
    scored = metrics_mod.read_scores(args.scores)
    key = corpus_mod.parse_trials(args.key)
    score_set = metrics_mod.score_set_from_trials(scored, key)
    p_tars = args.p_tar or [0.01, 0.001]
    parts = [f"EER={metrics_mod.eer(score_set):.6f}"]
    for p_tar in p_tars:
        value = metrics_mod.min_dcf(score_set, metrics_mod.DcfParams(p_tar=p_tar))
        parts.append(f"minDCF({p_tar:g})={value:.6f}")
    print(" ".join(parts))
    if args.det_csv:
        lines = ["p_miss,p_fa\n"]
        lines += [f"{m!r},{f!r}\n" for m, f in metrics_mod.det_points(score_set)]
        Path(args.det_csv).write_text("".join(lines))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spkembed",
        description="Speaker embedding pipeline: synthesize data, train, "
        "extract, fit backend, score, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature corpus")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="output corpus directory")
    for key, kind in _SYNTH_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=kind, dest=key)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an embedding network")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pooling", required=True, choices=POOLING_KINDS)
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--seed", type=int, help="sets both network and trainer seeds")
    p.add_argument("--quiet", action="store_true")
    for key, kind in _TRAIN_KEYS.items():
        if key in ("tdnn_layers", "utterance_layers", "pooling_kind"):
            continue
        p.add_argument(f"--{key.replace('_', '-')}", type=kind, dest=key)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract one embedding per utterance")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("backend", help="fit whitening and PLDA on embeddings")
    p.add_argument("--embeddings", required=True, help="embedding manifest")
    p.add_argument("--labels", help="optional 'utt speaker' override file")
    p.add_argument("--plda-iters", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backend)

    p = sub.add_parser("score", help="score trials against a fitted backend")
    p.add_argument("--backend", required=True, help="backend model file")
    p.add_argument("--trials", required=True)
    p.add_argument("--enroll", required=True, help="enrollment embedding manifest")
    p.add_argument("--test", required=True, help="test embedding manifest")
    p.add_argument("--method", choices=("plda", "cosine"), default="plda")
    p.add_argument("--out", required=True, help="output score file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute EER and minDCF from scores and a key")
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--p-tar", type=float, action="append", dest="p_tar")
    p.add_argument("--det-csv", help="optional DET curve CSV output")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DataReferenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for missing in exc.missing_ids:
            print(f"missing: {missing}", file=sys.stderr)
        return EXIT_DATA_REFERENCE
    except (SpkembedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
