"""Command-line entry point for the full experiment loop.

Subcommands: gen-data, pretrain, finetune, decode, eval, flops, attn-trace.
Every run is driven by one flat JSON config (plus overrides); every output
artifact embeds the resolved config, either inline (JSON reports) or as a
``<name>.meta.json`` sidecar (JSONL / CSV artifacts).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import biasing, checkpoint, datagen, evalkit, runtime, training
from .config import load_config, make_config
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    TrainingDiverged,
)
from .model import Model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_CHECKPOINT = 5
EXIT_DATA = 6
EXIT_DIVERGED = 7


def build_model(cfg):
    return Model(
        cfg.transducer_config(), cfg.biasing_config(), seed=cfg.seed, mode=cfg.mode
    )


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_meta(artifact_path, cfg, extra=None):
    meta = {"config": cfg.resolved()}
    if extra:
        meta.update(extra)
    _write_json(f"{artifact_path}.meta.json", meta)


def catalog_entries(cfg):
    return biasing.make_catalog(cfg.wake_words, cfg.proper_names, datagen.tokenize)


def build_cache(cfg, model, entries=None):
    entries = entries if entries is not None else catalog_entries(cfg)
    return biasing.build_catalog_cache(entries, model.biasing)


def run_gen_data(cfg, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    corpus = datagen.generate_corpus(cfg.corpus_spec())
    train_path = outdir / "train.jsonl"
    heldout_path = outdir / "heldout.jsonl"
    catalog_path = outdir / "catalog.tsv"
    datagen.write_corpus(train_path, corpus.train)
    datagen.write_corpus(heldout_path, corpus.heldout)
    biasing.save_catalog(catalog_path, catalog_entries(cfg))
    for p in (train_path, heldout_path, catalog_path):
        _write_meta(p, cfg)
    return {"train": str(train_path), "heldout": str(heldout_path), "catalog": str(catalog_path)}


def run_pretrain(cfg, corpus_path, out_path):
    utts = datagen.read_corpus(corpus_path)
    model = build_model(cfg)
    history = training.pretrain(model, utts, cfg.train_config(training.STAGE_PRETRAIN))
    checkpoint.save_checkpoint(out_path, model, cfg.resolved())
    _write_meta(out_path, cfg, {"loss_history_nats_per_label": history})
    return history


def run_finetune(cfg, ckpt_in, corpus_path, catalog_path, out_path):
    utts = datagen.read_corpus(corpus_path)
    entries = biasing.load_catalog(catalog_path, datagen.tokenize)
    model = build_model(cfg)
    checkpoint.load_checkpoint(ckpt_in, model)
    history = training.finetune_biasing(
        model,
        utts,
        entries,
        cfg.train_config(training.STAGE_FINETUNE),
        mask_policy=runtime.mask_policy_for_mode(cfg.mode),
    )
    checkpoint.save_checkpoint(out_path, model, cfg.resolved())
    _write_meta(out_path, cfg, {"loss_history_nats_per_label": history})
    return history


def decode_utterances(cfg, model, utts, cache=None, mode=None):
    """Greedy-decode utterances; returns (records, aggregate flops dict)."""
    mode = mode or cfg.mode
    records = []
    agg = {"leadin_frames": 0, "postww_frames": 0, "leadin_total_flops": 0, "postww_total_flops": 0}
    per_frame = {}
    for utt in sorted(utts, key=lambda u: u.utt_id):
        stream = runtime.AudioStream(utt.utt_id, utt.frames, utt.ww_end_frame)
        result = runtime.process_stream(
            stream, model, cache, mode=mode, max_symbols_per_frame=cfg.max_symbols_per_frame
        )
        text = datagen.detokenize(result.labels)
        rep = result.flops
        agg["leadin_frames"] += rep.leadin_frames
        agg["postww_frames"] += rep.postww_frames
        agg["leadin_total_flops"] += rep.leadin_total
        agg["postww_total_flops"] += rep.postww_total
        per_frame = {
            "convention_id": rep.convention_id,
            "mode": rep.mode,
            "leadin_mha_flops_per_frame": rep.leadin_mha_flops_per_frame,
            "postww_mha_flops_per_frame": rep.postww_mha_flops_per_frame,
        }
        records.append({"id": utt.utt_id, "labels": result.labels, "text": text})
    agg.update(per_frame)
    agg["total_flops"] = agg["leadin_total_flops"] + agg["postww_total_flops"]
    return records, agg


def run_decode(cfg, ckpt_path, corpus_path, out_path, catalog_path=None, mode=None):
    mode = mode or cfg.mode
    utts = datagen.read_corpus(corpus_path)
    model = build_model(cfg)
    checkpoint.load_checkpoint(ckpt_path, model)
    cache = None
    if mode != runtime.MODE_PRETRAINED_BASE:
        entries = (
            biasing.load_catalog(catalog_path, datagen.tokenize)
            if catalog_path
            else catalog_entries(cfg)
        )
        cache = biasing.build_catalog_cache(entries, model.biasing)
    records, agg = decode_utterances(cfg, model, utts, cache, mode=mode)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    _write_meta(out_path, cfg, {"flops": agg, "mode": mode})
    return records, agg


def read_decoded(path):
    records = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records[rec["id"]] = rec
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{ln}: malformed decode record ({exc})") from exc
    return records


def evaluate_decodes(cfg, utts, decoded):
    """Metric summary of decoded hypotheses against reference utterances."""
    pairs_all, pairs_general, pairs_pn = [], [], []
    decisions = []
    pn_hits = 0
    pn_total = 0
    for utt in utts:
        if utt.utt_id not in decoded:
            raise DataError(f"decoded output is missing utterance {utt.utt_id}")
        hyp_text = decoded[utt.utt_id]["text"]
        ref_words, hyp_words = utt.text.split(), hyp_text.split()
        pairs_all.append((ref_words, hyp_words))
        if utt.spoken_pn:
            pairs_pn.append((ref_words, hyp_words))
            pn_total += 1
            if utt.spoken_pn in hyp_text:
                pn_hits += 1
        else:
            pairs_general.append((ref_words, hyp_words))
        decisions.append(
            evalkit.WWDecision(
                utterance_id=utt.utt_id,
                ground_truth_positive=utt.is_true_ww,
                accepted=evalkit.decide_ww(hyp_text, cfg.wake_words),
            )
        )
    report = evalkit.build_report(pairs_all, decisions)

    def subset_wer(pairs):
        edits = sum(evalkit.edit_distance(r, h) for r, h in pairs)
        words = sum(len(r) for r, _ in pairs)
        return edits / words if words else None

    return {
        "config": cfg.resolved(),
        "overall": report.as_dict(),
        "general_wer": subset_wer(pairs_general),
        "proper_names_wer": subset_wer(pairs_pn),
        "pn_accuracy": (pn_hits / pn_total) if pn_total else None,
        "n_utterances": len(utts),
    }


def run_eval_metrics(cfg, corpus_path, decoded_path, out_path):
    utts = datagen.read_corpus(corpus_path)
    decoded = read_decoded(decoded_path)
    summary = evaluate_decodes(cfg, utts, decoded)
    _write_json(out_path, summary)
    return summary


def run_eval_relative(baseline_path, candidate_path, out_path):
    with open(baseline_path, encoding="utf-8") as fh:
        base = json.load(fh)
    with open(candidate_path, encoding="utf-8") as fh:
        cand = json.load(fh)
    base_rep = evalkit.MetricsReport.from_dict(base["overall"])
    cand_rep = evalkit.MetricsReport.from_dict(cand["overall"])
    rel = evalkit.relative_report(base_rep, cand_rep)
    payload = {
        "baseline": baseline_path,
        "candidate": candidate_path,
        "relative": rel,
        "config": cand.get("config", {}),
    }
    _write_json(out_path, payload)
    row = {
        "model": "candidate",
        "F1R": evalkit.format_percent(rel["f1r"]),
        "TRRR": evalkit.format_percent(rel["trrr"]),
        "TARR": evalkit.format_percent(rel["tarr"]),
        "WERR": evalkit.format_percent(rel["werr"]),
    }
    print(evalkit.format_table([row], ["model", "F1R", "TRRR", "TARR", "WERR"]))
    return payload


def run_flops(cfg, leadin_catalog=None, postww_catalog=None, out_path=None):
    tcfg = cfg.transducer_config()
    bcfg = cfg.biasing_config()
    n_small = leadin_catalog if leadin_catalog is not None else len(cfg.wake_words)
    n_large = postww_catalog if postww_catalog is not None else len(cfg.proper_names)
    report = runtime.FlopsReport(
        convention_id=runtime.FLOPS_CONVENTION,
        mode=cfg.mode,
        leadin_mha_flops_per_frame=runtime.flops_count(tcfg, bcfg, "small", n_small),
        postww_mha_flops_per_frame=runtime.flops_count(tcfg, bcfg, "large", n_large),
        leadin_frames=0,
        postww_frames=0,
        config={
            "analytic": "per-frame report; no stream processed",
            "leadin_active_catalog": n_small,
            "postww_active_catalog": n_large,
            "run_config": cfg.resolved(),
        },
    )
    payload = report.as_dict()
    payload["param_counts"] = runtime.param_count(
        bcfg,
        small_query_dim=tcfg.encoder_output_dim("small"),
        large_query_dim=tcfg.encoder_output_dim("large"),
        token_vocab=tcfg.vocab_size,
    )
    if out_path:
        _write_json(out_path, payload)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return payload


def run_attn_trace(cfg, ckpt_path, corpus_path, out_path, catalog_path=None, utt_id=None):
    utts = datagen.read_corpus(corpus_path)
    if utt_id is not None:
        utts = [u for u in utts if u.utt_id == utt_id]
        if not utts:
            raise DataError(f"utterance {utt_id!r} not found in {corpus_path}")
    utt = utts[0]
    model = build_model(cfg)
    checkpoint.load_checkpoint(ckpt_path, model)
    entries = (
        biasing.load_catalog(catalog_path, datagen.tokenize)
        if catalog_path
        else catalog_entries(cfg)
    )
    cache = biasing.build_catalog_cache(entries, model.biasing)
    stream = runtime.AudioStream(utt.utt_id, utt.frames, utt.ww_end_frame)
    trace = runtime.attention_trace(
        stream, model, cache, max_symbols_per_frame=cfg.max_symbols_per_frame
    )
    biasing.write_attention_trace(out_path, cache, trace)
    _write_meta(out_path, cfg, {"utterance_id": utt.utt_id, "frames": trace.shape[0]})
    return trace


def _parse_set_values(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _resolve_config(args):
    overrides = _parse_set_values(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "lambda_", None) is not None:
        overrides["small_proj_dim"] = args.lambda_
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if args.config:
        return load_config(args.config, overrides)
    return make_config(overrides)


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument(
        "--lambda",
        dest="lambda_",
        type=int,
        choices=(8, 16, 32, 64),
        help="small attention projection size",
    )
    p.add_argument("--mode", choices=runtime.MODES, help="model family to run")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config key (value parsed as JSON when possible)",
    )


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pivotasr",
        description="wake-word-pivoted dual-attention biasing transducer toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and catalog")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain", help="pretrain the bifocal transducer")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("finetune", help="fine-tune the biasing layers")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("decode", help="greedy-decode a corpus")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--catalog")
    p.add_argument("--out", required=True, help="decoded JSONL path")

    p = sub.add_parser("eval", help="score decodes or compare two metric reports")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--decoded")
    p.add_argument("--baseline")
    p.add_argument("--candidate")
    p.add_argument("--out", required=True)

    p = sub.add_parser("flops", help="analytic per-frame attention cost report")
    _add_common(p)
    p.add_argument("--leadin-catalog", type=int)
    p.add_argument("--postww-catalog", type=int)
    p.add_argument("--out")

    p = sub.add_parser("attn-trace", help="dump per-frame attention weights to CSV")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--catalog")
    p.add_argument("--utt-id")
    p.add_argument("--out", required=True)

    return parser


def _dispatch(args):
    cfg = _resolve_config(args)
    if args.command == "gen-data":
        run_gen_data(cfg, args.out)
    elif args.command == "pretrain":
        run_pretrain(cfg, args.corpus, args.out)
    elif args.command == "finetune":
        run_finetune(cfg, args.ckpt, args.corpus, args.catalog, args.out)
    elif args.command == "decode":
        run_decode(cfg, args.ckpt, args.corpus, args.out, args.catalog, mode=args.mode)
    elif args.command == "eval":
        if args.baseline or args.candidate:
            if not (args.baseline and args.candidate):
                raise ConfigError("relative eval needs both --baseline and --candidate")
            run_eval_relative(args.baseline, args.candidate, args.out)
        else:
            if not (args.corpus and args.decoded):
                raise ConfigError("metric eval needs --corpus and --decoded")
            run_eval_metrics(cfg, args.corpus, args.decoded, args.out)
    elif args.command == "flops":
        run_flops(cfg, args.leadin_catalog, args.postww_catalog, args.out)
    elif args.command == "attn-trace":
        run_attn_trace(cfg, args.ckpt, args.corpus, args.out, args.catalog, args.utt_id)
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: training-diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
