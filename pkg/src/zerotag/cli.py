"""Command-line entry point for the full pipeline.

Subcommands: synth, train, annotate, retrieve, evaluate, transfer, gradcheck.
Configuration comes from an optional flat key=value file (dotted keys like
``train.margin`` or ``encoder.channels``) with flags taking precedence; the
effective configuration is echoed into every output artifact.

Exit codes: 0 success, 1 usage/validation error, 2 data or format error,
3 numerical failure (non-finite loss, gradient check above threshold).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from pathlib import Path

import numpy as np

from .data import ManifestError, SPLITS, ToyCorpusConfig, load_manifest, serialize_manifest, synth_toy_corpus
from .dsp import DspConfig, PatchPolicy, WavFormatError, decode_wav, encode_wav
from .encoder import EncoderConfig
from .infer import annotate as infer_annotate
from .infer import build_label_index, embed_tracks, retrieve_tracks
from .metrics import genre_accuracy, tag_retrieval_auc, transfer_evaluate
from .training import CheckpointError, NumericalError, TrainConfig, fit, load_checkpoint, save_checkpoint
from .verify import GRADCHECK_THRESHOLD, run_gradient_suite
from .wordspace import STRICT_POLICY, WordVectorParseError, normalize_tag, parse_word_vectors

_JOIN_CHARS = str.maketrans("", "", " -\t")


class UsageError(ValueError):
    """Bad flags or configuration values; maps to exit code 1."""


_CONFIG_SECTIONS: dict[str, type] = {
    "dsp": DspConfig,
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "toy": ToyCorpusConfig,
    "patch": PatchPolicy,
}


def _parse_scalar(text: str, target_type) -> object:
    if target_type is bool:
        if text.lower() in ("1", "true", "on", "yes"):
            return True
        if text.lower() in ("0", "false", "off", "no"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is str:
        return text
    raise UsageError(f"unsupported config value type {target_type}")


def _parse_field_value(text: str, field: dataclasses.Field) -> object:
    origin = typing.get_origin(field.type) if not isinstance(field.type, str) else None
    # dataclass fields carry string annotations under `from __future__ import
    # annotations`; fall back to the default's type
    if isinstance(field.type, str):
        if field.type.startswith("tuple"):
            origin = tuple
        else:
            return _parse_scalar(text, type(field.default) if field.default is not dataclasses.MISSING else str)
    if origin is tuple:
        element = type(field.default_factory()[0]) if field.default_factory is not dataclasses.MISSING else None
        if element is None and field.default is not dataclasses.MISSING and field.default:
            element = type(field.default[0])
        element = element or float
        items = [s for s in text.replace(",", " ").split() if s]
        return tuple(_parse_scalar(s, element) for s in items)
    return _parse_scalar(text, field.type if not isinstance(field.type, str) else str)


class RunConfig:
    """Flat dotted-key settings merged from a config file and flag overrides."""

    def __init__(self):
        self.values: dict[str, str] = {}

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        config = cls()
        if path is not None:
            for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise UsageError(f"{path}:{line_no}: expected 'key = value'")
                key, value = (s.strip() for s in stripped.split("=", 1))
                config.set(key, value)
        for key, value in (overrides or {}).items():
            config.set(key, value)
        return config

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if section not in _CONFIG_SECTIONS or not name:
            raise UsageError(f"unknown config key {key!r}")
        valid = {f.name for f in dataclasses.fields(_CONFIG_SECTIONS[section])}
        if name not in valid:
            raise UsageError(f"unknown config key {key!r} (section {section!r} has: {', '.join(sorted(valid))})")
        self.values[key] = value

    def build(self, section: str):
        cls = _CONFIG_SECTIONS[section]
        kwargs = {}
        for field in dataclasses.fields(cls):
            key = f"{section}.{field.name}"
            if key in self.values:
                kwargs[field.name] = _parse_field_value(self.values[key], field)
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise UsageError(f"invalid {section} configuration: {exc}") from None

    def effective(self) -> dict[str, str]:
        out = {}
        for section in _CONFIG_SECTIONS:
            instance = self.build(section)
            for field in dataclasses.fields(instance):
                value = getattr(instance, field.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                out[f"{section}.{field.name}"] = str(value)
        return out

    def echo_lines(self) -> list[str]:
        return [f"{key} = {value}" for key, value in sorted(self.effective().items())]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must not sys.exit(2)
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="zerotag", description="Zero-shot music tagging and retrieval.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, *, config=True, seed=True):
        if config:
            p.add_argument("--config", metavar="PATH", help="flat dotted-key = value config file")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="seed override (default from config)")

    p = sub.add_parser("synth", help="synthesize the toy corpus (WAV + manifest + word vectors)")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")

    p = sub.add_parser("train", help="train encoder and projection on a manifest")
    common(p)
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--word-vectors", required=True, metavar="PATH")
    p.add_argument("--tags", required=True, metavar="PATH", help="training vocabulary, one tag per line")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="output checkpoint file")
    p.add_argument("--corpus-name", default=None, help="corpus identity recorded in the checkpoint")
    p.add_argument("--deterministic", choices=("on", "off"), default=None)

    p = sub.add_parser("annotate", help="score candidate tags for one audio file")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--audio", required=True, metavar="PATH")
    p.add_argument("--tags", required=True, metavar="PATH", help="candidate tags, one per line")
    p.add_argument("--word-vectors", required=True, metavar="PATH")
    p.add_argument("--threshold", type=float, default=0.6)

    p = sub.add_parser("retrieve", help="rank manifest tracks for a query tag")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--word-vectors", required=True, metavar="PATH")
    p.add_argument("--query", required=True, metavar="TAG")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)

    for name, help_text in (("evaluate", "evaluate a checkpoint on a manifest's test split"),
                            ("transfer", "cross-corpus transfer evaluation (no adaptation)")):
        p = sub.add_parser(name, help=help_text)
        common(p, seed=False)
        p.add_argument("--checkpoint", required=True, metavar="PATH")
        p.add_argument("--manifest", required=True, metavar="PATH")
        p.add_argument("--word-vectors", required=True, metavar="PATH")
        p.add_argument("--tags", required=True, metavar="PATH", help="candidate tag set of the target dataset")
        p.add_argument("--protocol", choices=("auc", "accuracy"), required=True)
        p.add_argument("--auc-variant", choices=("macro", "global"), default="macro")
        p.add_argument("--out", metavar="PATH", help="write structured report records here")
        p.add_argument("--threads", type=int, default=1)
        if name == "transfer":
            p.add_argument("--target-name", required=True, help="target corpus identity for provenance")

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    common(p, config=False)
    p.add_argument("--n-seeds", type=int, default=20)
    return parser


def _read_tag_file(path: str) -> list[str]:
    tags = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    tags = [t for t in tags if t and not t.startswith("#")]
    if not tags:
        raise ManifestError(f"tag file {path} is empty")
    return tags


def _allow_list(tags: list[str]) -> set[str]:
    allow: set[str] = set()
    for tag in tags:
        norm = normalize_tag(tag)
        allow.add(norm)
        allow.add(norm.translate(_JOIN_CHARS))
        allow.update(w for w in norm.replace("-", " ").split() if w)
    return allow


def _load_table(path: str, tags: list[str] | None):
    with open(path, "r", encoding="utf-8") as stream:
        return parse_word_vectors(stream, allow_list=_allow_list(tags) if tags else None)


def _test_split(records):
    if any(r.split is not None for r in records):
        chosen = [r for r in records if r.split == "test"]
        if not chosen:
            raise ManifestError("manifest has split fields but no test records")
        return chosen
    return records


def _cmd_synth(args) -> int:
    config = RunConfig.load(args.config, {"toy.seed": str(args.seed)} if args.seed is not None else {})
    toy_config = config.build("toy")
    toy = synth_toy_corpus(toy_config)
    out = Path(args.out)
    (out / "audio").mkdir(parents=True, exist_ok=True)

    records = []
    for record in toy.records:
        rel = f"audio/{record.track_id}.wav"
        (out / rel).write_bytes(encode_wav(record.signal, "float32"))
        records.append(dataclasses.replace(record, audio_path=rel, signal=None))
    (out / "manifest.tsv").write_text(serialize_manifest(records), encoding="utf-8")

    lines = [f"{tag} " + " ".join(repr(float(x)) for x in toy.word_table.entries[tag])
             for tag in sorted(toy.word_table.entries)]
    (out / "word_vectors.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "tags_seen.txt").write_text("\n".join(toy.seen_tags) + "\n", encoding="utf-8")
    (out / "tags_unseen.txt").write_text("\n".join(toy.unseen_tags) + "\n", encoding="utf-8")
    (out / "tags_all.txt").write_text("\n".join(toy.seen_tags + toy.unseen_tags) + "\n", encoding="utf-8")
    (out / "run_config.txt").write_text("\n".join(config.echo_lines()) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} tracks, manifest, word vectors, and tag lists to {out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.deterministic is not None:
        overrides["train.deterministic"] = args.deterministic
    config = RunConfig.load(args.config, overrides)
    train_config = config.build("train")
    encoder_config = config.build("encoder")
    dsp_config = config.build("dsp")
    patch_policy = config.build("patch")
    if patch_policy.frames != encoder_config.patch_frames:
        raise UsageError(
            f"patch.frames={patch_policy.frames} must equal encoder.patch_frames={encoder_config.patch_frames}"
        )

    records = load_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    if any(r.split is not None for r in records):
        records = [r for r in records if r.split == "train"]
        if not records:
            raise ManifestError("manifest has split fields but no train records")
    vocab = _read_tag_file(args.tags)
    table = _load_table(args.word_vectors, vocab)
    corpus_name = args.corpus_name if args.corpus_name is not None else Path(args.manifest).stem

    checkpoint, history = fit(
        records, vocab, table, train_config, encoder_config, dsp_config, patch_policy,
        corpus_name=corpus_name, base_dir=str(Path(args.manifest).parent),
    )
    checkpoint.metadata["effective_config"] = config.effective()
    save_checkpoint(checkpoint, args.checkpoint)
    for epoch, loss in enumerate(history, start=1):
        print(f"epoch {epoch:3d}  mean loss {loss:.6f}")
    print(f"checkpoint written to {args.checkpoint} ({len(records)} tracks, vocab {len(checkpoint.tag_vocab)})")
    return 0


def _cmd_annotate(args) -> int:
    if not (-1.0 <= args.threshold <= 1.0):
        raise UsageError(f"--threshold must be in [-1, 1] (cosine range), got {args.threshold}")
    checkpoint = load_checkpoint(args.checkpoint)
    tags = _read_tag_file(args.tags)
    table = _load_table(args.word_vectors, tags)
    index = build_label_index(checkpoint, tags, table, STRICT_POLICY)
    signal = decode_wav(Path(args.audio).read_bytes())
    result = infer_annotate(checkpoint, signal, index, args.threshold)
    print(f"# audio: {args.audio}  threshold: {args.threshold}  candidates: {len(index)}"
          + (f"  dropped: {','.join(index.dropped)}" if index.dropped else ""))
    selected = set(result.selected)
    for tag, score in result.ranking:
        marker = "*" if tag in selected else " "
        print(f"{marker} {score:+.4f}  {tag}")
    return 0


def _cmd_retrieve(args) -> int:
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    checkpoint = load_checkpoint(args.checkpoint)
    records = load_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    table = _load_table(args.word_vectors, [args.query])
    embeddings = embed_tracks(checkpoint, records, base_dir=str(Path(args.manifest).parent),
                              threads=args.threads)
    k = min(args.topk, len(embeddings))
    ranked = retrieve_tracks(checkpoint, args.query, embeddings, k, table, STRICT_POLICY)
    print(f"# query: {args.query}  corpus: {args.manifest}  tracks: {len(embeddings)}")
    for rank, (track_id, score) in enumerate(ranked, start=1):
        print(f"{rank:4d}  {score:+.4f}  {track_id}")
    return 0


def _cmd_eval(args, transfer: bool) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    records = _test_split(load_manifest(Path(args.manifest).read_text(encoding="utf-8")))
    tags = _read_tag_file(args.tags)
    table = _load_table(args.word_vectors, tags)
    base_dir = str(Path(args.manifest).parent)
    if transfer:
        report = transfer_evaluate(checkpoint, args.target_name, records, tags, args.protocol,
                                   table, STRICT_POLICY, base_dir=base_dir, threads=args.threads,
                                   auc_variant=args.auc_variant)
    elif args.protocol == "auc":
        report = tag_retrieval_auc(checkpoint, records, tags, table, STRICT_POLICY,
                                   variant=args.auc_variant, base_dir=base_dir, threads=args.threads)
    else:
        report = genre_accuracy(checkpoint, records, tags, table, STRICT_POLICY,
                                base_dir=base_dir, threads=args.threads)
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(report.to_records(), encoding="utf-8")
        print(f"report records written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    worst, detail = run_gradient_suite(n_seeds=args.n_seeds, base_seed=seed)
    for check, err in sorted(detail.items()):
        print(f"{check:16s} max relative error {err:.3e}")
    print(f"overall max relative error {worst:.3e} (threshold {GRADCHECK_THRESHOLD:.0e})")
    if worst >= GRADCHECK_THRESHOLD:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "annotate": _cmd_annotate,
        "retrieve": _cmd_retrieve,
        "evaluate": lambda a: _cmd_eval(a, transfer=False),
        "transfer": lambda a: _cmd_eval(a, transfer=True),
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WavFormatError, ManifestError, WordVectorParseError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error ({args.command}): {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure ({args.command}): {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"data error ({args.command}): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
