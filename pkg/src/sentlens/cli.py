"""Command-line pipeline: gen-synth, train, encode, match, mine, probe,
langvec, binarize.

Every run writes a manifest.json recording the resolved config, inputs,
outputs, seed, toolkit version and wall-clock time. With default settings
(single thread, seeds from configs) output files are byte-identical across
re-runs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import export_projection_input, language_vector, probe_eval, probe_train
from .corpus import (
    RelatednessList,
    SynthConfig,
    gen_synthetic,
    read_corpus,
    read_pairs,
    write_corpus,
    write_pairs,
)
from .encoders import MeanPoolLens, batch_encode, load_lens, save_lens
from .retrieval import (
    MarginConfig,
    binarize,
    binary_similarity_matrix,
    calibrate_threshold,
    cosine_matrix,
    f1_score,
    gold_columns,
    margin_score,
    match_error,
    mine_pairs,
)
from .training import SEARCH_SPACE, TrainConfig, train
from .vectors import read_vectors, write_vectors

PRESETS = {
    "bow-meanpool": {"encoder": "meanpool", "module": "ranker"},
    "sCL-simple-classifier": {"encoder": "simple", "module": "classifier"},
    "sCL-simple-ranker": {"encoder": "simple", "module": "ranker"},
    "CL-gatedconv-classifier": {"encoder": "gatedconv", "module": "classifier"},
    "CL-gatedconv-ranker": {"encoder": "gatedconv", "module": "ranker"},
}

_SYNTH_KEYS = {
    "languages", "sentences_per_language", "latent_dim", "embed_dim",
    "token_range", "shared_gain", "offset_gain", "noise_sigma", "seed",
    "train_sentences", "val_sentences",
}


class CliError(ValueError):
    pass


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _write_manifest(out_dir: Path, subcommand: str, config: dict, inputs: list,
                    outputs: list, seed, started: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "version": __version__,
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_vector_args(items):
    """['tag=path', ...] -> list of (tag, path)."""
    out = []
    for item in items:
        tag, sep, path = item.partition("=")
        if not sep or not tag or not path:
            raise CliError(f"expected tag=path, got {item!r}")
        out.append((tag, Path(path)))
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    started = time.perf_counter()
    raw = _load_json(args.config) if args.config else {}
    unknown = set(raw) - _SYNTH_KEYS
    if unknown:
        raise CliError(f"unknown gen-synth config keys: {sorted(unknown)}")
    train_n = int(raw.pop("train_sentences", 400))
    val_n = int(raw.pop("val_sentences", 50))
    if "languages" in raw:
        raw["languages"] = tuple(raw["languages"])
    if "token_range" in raw:
        raw["token_range"] = tuple(raw["token_range"])
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig(**raw)
    total = cfg.sentences_per_language
    if train_n + val_n > total:
        raise CliError(f"train+val sentences {train_n}+{val_n} exceed {total}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpora, gold = gen_synthetic(cfg)
    outputs = []
    for lang, corpus in corpora.items():
        path = out / f"{lang}.clem"
        write_corpus(corpus, path)
        outputs.append(path.name)

    id_of = {lang: {i: rec.id for i, rec in enumerate(corpus.records)}
             for lang, corpus in corpora.items()}
    for (la, lb), pairs in gold.items():
        path = out / f"gold_{la}_{lb}.tsv"
        write_pairs(RelatednessList("rank", [(a, b, None) for a, b in pairs]), path)
        outputs.append(path.name)
        heldout = [(id_of[la][i], id_of[lb][i], None) for i in range(train_n, total)]
        path = out / f"gold_heldout_{la}_{lb}.tsv"
        write_pairs(RelatednessList("rank", heldout), path)
        outputs.append(path.name)

    # training pairs: sentence indices partitioned across language pairs so
    # no sentence shows up twice inside one in-batch negative pool
    lang_pairs = sorted(gold.keys())
    chunks = np.array_split(np.arange(train_n), len(lang_pairs))
    train_entries = []
    for (la, lb), chunk in zip(lang_pairs, chunks):
        train_entries.extend((id_of[la][int(i)], id_of[lb][int(i)], None) for i in chunk)
    train_path = out / "train_pairs.tsv"
    write_pairs(RelatednessList("rank", train_entries), train_path)
    outputs.append(train_path.name)

    la, lb = lang_pairs[0]
    val_entries = [(id_of[la][i], id_of[lb][i], None)
                   for i in range(train_n, train_n + val_n)]
    val_path = out / "val_pairs.tsv"
    write_pairs(RelatednessList("rank", val_entries), val_path)
    outputs.append(val_path.name)

    config = {**{k: getattr(cfg, k) for k in (
        "languages", "sentences_per_language", "latent_dim", "embed_dim",
        "token_range", "shared_gain", "offset_gain", "noise_sigma", "seed")},
        "train_sentences": train_n, "val_sentences": val_n}
    config["languages"] = list(config["languages"])
    config["token_range"] = list(config["token_range"])
    _write_manifest(out, "gen-synth", config, [args.config] if args.config else [],
                    outputs, cfg.seed, started)
    print(f"wrote {len(corpora)} corpora to {out}")
    return 0


def _resolve_train_config(raw: dict, seed) -> TrainConfig:
    raw = dict(raw)
    preset = raw.pop("preset", None)
    fields = {}
    if preset is not None:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        fields.update(PRESETS[preset])
    valid = set(TrainConfig.__dataclass_fields__)
    unknown = set(raw) - valid
    if unknown:
        raise CliError(f"unknown train config keys: {sorted(unknown)}")
    fields.update(raw)
    if seed is not None:
        fields["seed"] = seed
    return TrainConfig(**fields)


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _resolve_train_config(_load_json(args.config) if args.config else {}, args.seed)
    corpora = [read_corpus(p) for p in args.corpus]
    mode = "rank" if cfg.module == "ranker" else "classify"
    pairs = read_pairs(args.pairs, mode)
    validation = read_pairs(args.val_pairs, mode)

    lens, history = train(corpora, pairs, cfg, validation)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "lens.cllp"
    save_lens(lens, ckpt)
    metrics = out / "metrics.tsv"
    with open(metrics, "w", encoding="utf-8") as f:
        f.write("step\tlr\tloss\tval_metric\n")
        for row in history:
            f.write(f"{row['step']}\t{row['lr']!r}\t{row['loss']!r}"
                    f"\t{row['val_metric']!r}\n")
    config_path = out / "config.json"
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(cfg.__dict__, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(out, "train", cfg.__dict__,
                    list(args.corpus) + [args.pairs, args.val_pairs],
                    [ckpt.name, metrics.name, config_path.name], cfg.seed, started)
    print(f"final validation metric: {history[-1]['val_metric']:.6g}")
    return 0


def cmd_encode(args) -> int:
    started = time.perf_counter()
    corpus = read_corpus(args.corpus)
    if args.meanpool:
        lens = MeanPoolLens(corpus.dim)
        lens_desc = "meanpool"
    else:
        if not args.checkpoint:
            raise CliError("need --checkpoint or --meanpool")
        lens = load_lens(args.checkpoint)
        lens_desc = str(args.checkpoint)
    matrix, ids = batch_encode(corpus, lens, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_vectors(out, ids, matrix)
    _write_manifest(out.parent, "encode",
                    {"lens": lens_desc, "threads": args.threads},
                    [args.corpus], [out.name], None, started)
    print(f"encoded {len(ids)} vectors of dim {matrix.shape[1]} -> {out}")
    return 0


def _load_matching_task(src_path, tgt_path, gold_path):
    """Vectors restricted to the gold-covered ids, plus gold column indices."""
    src_ids, src = read_vectors(src_path)
    tgt_ids, tgt = read_vectors(tgt_path)
    gold = read_pairs(gold_path, "rank")
    src_pos = {rid: i for i, rid in enumerate(src_ids)}
    tgt_pos = {rid: i for i, rid in enumerate(tgt_ids)}
    rows, cols = [], []
    for a, b, _ in gold.entries:
        if a not in src_pos:
            raise CliError(f"gold id {a} missing from {src_path}")
        if b not in tgt_pos:
            raise CliError(f"gold id {b} missing from {tgt_path}")
        rows.append(a)
        cols.append(b)
    A = src[[src_pos[a] for a in rows]]
    B = tgt[[tgt_pos[b] for b in cols]]
    return A, B, rows, cols


def cmd_match(args) -> int:
    started = time.perf_counter()
    A, B, rows, cols = _load_matching_task(args.src, args.tgt, args.gold)
    sim = cosine_matrix(A, B, row_ids=rows, col_ids=cols, threads=args.threads)
    gold_idx = gold_columns(sim, list(zip(rows, cols)))
    forward = match_error(sim, gold_idx)
    sim_back = cosine_matrix(B, A, row_ids=cols, col_ids=rows, threads=args.threads)
    backward = match_error(sim_back, np.arange(len(cols)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("metric\tvalue\n")
        f.write(f"match_error_src_tgt\t{forward!r}\n")
        f.write(f"match_error_tgt_src\t{backward!r}\n")
        f.write(f"match_error_mean\t{(forward + backward) / 2!r}\n")
        f.write(f"pairs\t{len(rows)}\n")
    _write_manifest(out.parent, "match", {"threads": args.threads},
                    [args.src, args.tgt, args.gold], [out.name], None, started)
    print(f"match error src->tgt {forward:.4f}, tgt->src {backward:.4f}")
    return 0


def cmd_mine(args) -> int:
    started = time.perf_counter()
    src_ids, src = read_vectors(args.src)
    tgt_ids, tgt = read_vectors(args.tgt)
    sim = cosine_matrix(src, tgt, row_ids=src_ids, col_ids=tgt_ids, threads=args.threads)
    scored = margin_score(sim, MarginConfig(k=args.k))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    config = {"k": args.k}

    if args.calibrate:
        gold = [(a, b) for a, b, _ in read_pairs(args.calibrate, "rank").entries]
        tau, best_f1, sweep = calibrate_threshold(scored, gold)
        sweep_path = out / "sweep.tsv"
        with open(sweep_path, "w", encoding="utf-8") as f:
            f.write("threshold\tprecision\trecall\tf1\n")
            for row in sweep:
                f.write("\t".join(repr(float(x)) for x in row) + "\n")
        outputs.append(sweep_path.name)
        config["calibrated_threshold"] = tau
        config["calibrated_f1"] = best_f1
    elif args.threshold is not None:
        tau = args.threshold
    else:
        raise CliError("need --threshold or --calibrate")

    result = mine_pairs(scored, tau)
    config["threshold"] = float(tau)
    cand_path = out / "candidates.tsv"
    with open(cand_path, "w", encoding="utf-8") as f:
        for sid, tid, score in result.candidates:
            f.write(f"{score!r}\t{sid}\t{tid}\n")
    outputs.append(cand_path.name)
    if args.calibrate:
        precision, recall, f1 = f1_score(result, gold)
        print(f"tau={tau:.4f} precision={precision:.4f} recall={recall:.4f} f1={f1:.4f}")
    else:
        print(f"mined {len(result.candidates)} pairs at tau={tau:.4f}")
    _write_manifest(out, "mine", config, [args.src, args.tgt], outputs, None, started)
    return 0


def cmd_probe(args) -> int:
    started = time.perf_counter()
    tagged = _parse_vector_args(args.vectors)
    blocks, labels = [], []
    for tag, path in tagged:
        _, matrix = read_vectors(path)
        blocks.append(matrix)
        labels.extend([tag] * matrix.shape[0])
    X = np.vstack(blocks)
    y = np.array(labels)
    model = probe_train(X, y, train_fraction=args.train_fraction, seed=args.seed)
    accuracy = probe_eval(model, X, y)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("metric\tvalue\n")
        f.write(f"accuracy\t{accuracy!r}\n")
        f.write(f"train_fraction\t{args.train_fraction!r}\n")
        f.write(f"classes\t{len(model.labels)}\n")
    _write_manifest(out.parent, "probe",
                    {"train_fraction": args.train_fraction, "seed": args.seed},
                    [str(p) for _, p in tagged], [out.name], args.seed, started)
    print(f"language probe accuracy: {accuracy:.4f}")
    return 0


def cmd_langvec(args) -> int:
    started = time.perf_counter()
    tagged = _parse_vector_args(args.vectors)
    rows, tags = [], []
    for tag, path in tagged:
        _, matrix = read_vectors(path)
        rows.append(language_vector(matrix, tag).variances)
        tags.append(tag)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_projection_input(np.array(rows), tags, out)
    _write_manifest(out.parent, "langvec", {}, [str(p) for _, p in tagged],
                    [out.name], None, started)
    print(f"wrote {len(tags)} language vectors -> {out}")
    return 0


def cmd_binarize(args) -> int:
    started = time.perf_counter()
    src_ids, src = read_vectors(args.vectors)
    bits_src, fraction = binarize(src, args.theta)
    lines = [("theta", args.theta), ("active_fraction", fraction)]
    inputs = [args.vectors]
    if args.tgt and args.gold:
        A, B, rows, cols = _load_matching_task(args.vectors, args.tgt, args.gold)
        gold_pairs = list(zip(rows, cols))
        dense = cosine_matrix(A, B, row_ids=rows, col_ids=cols)
        dense_err = match_error(dense, gold_columns(dense, gold_pairs))
        ba, _ = binarize(A, args.theta)
        bb, frac_tgt = binarize(B, args.theta)
        binary = binary_similarity_matrix(ba, bb, row_ids=rows, col_ids=cols)
        binary_err = match_error(binary, gold_columns(binary, gold_pairs))
        lines += [("active_fraction_tgt", frac_tgt),
                  ("dense_match_error", dense_err),
                  ("binary_match_error", binary_err)]
        inputs += [args.tgt, args.gold]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("metric\tvalue\n")
        for name, value in lines:
            f.write(f"{name}\t{float(value)!r}\n")
    _write_manifest(out.parent, "binarize", {"theta": args.theta}, inputs,
                    [out.name], None, started)
    print(f"active fraction at theta={args.theta:g}: {fraction:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sentlens",
        description="Train reduction lenses over frozen token-embedding corpora "
                    "and run matching, mining and probing pipelines.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic multilingual corpus")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train lens parameters on relatedness pairs")
    p.add_argument("--corpus", action="append", required=True,
                   help="CLEM corpus; repeat for multiple languages")
    p.add_argument("--pairs", required=True)
    p.add_argument("--val-pairs", required=True)
    p.add_argument("--config", help="JSON train config (preset + overrides)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a corpus into sentence vectors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--meanpool", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("match", help="cosine matching error against gold pairs")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("mine", help="margin-scored parallel-pair mining")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--calibrate", help="gold pairs TSV for threshold calibration")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("probe", help="language-ID logistic probe on vector files")
    p.add_argument("--vectors", action="append", required=True, metavar="TAG=PATH")
    p.add_argument("--train-fraction", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("langvec", help="per-language variance vectors for projection")
    p.add_argument("--vectors", action="append", required=True, metavar="TAG=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_langvec)

    p = sub.add_parser("binarize", help="threshold vectors into bits; optional matching")
    p.add_argument("--vectors", required=True)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--tgt", help="second vector file for binary matching")
    p.add_argument("--gold", help="gold pairs for binary matching")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_binarize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
