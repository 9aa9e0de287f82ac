# Calibration scratch script (not part of the package).
import sys
import time

import numpy as np

import pivotasr.biasing as bi
import pivotasr.runtime as rt
import pivotasr.training as train
from pivotasr import make_config
from pivotasr.cli import build_model, catalog_entries, decode_utterances, evaluate_decodes
from pivotasr.datagen import generate_corpus


def summarize(tag, s):
    print(
        f"  {tag}: wer={s['overall']['wer']:.3f} tar={s['overall']['tar']:.3f} "
        f"trr={s['overall']['trr']:.3f} f1={s['overall']['f1']:.3f} "
        f"gwer={s['general_wer']:.3f} pnwer={s['proper_names_wer']:.3f} "
        f"pnacc={s['pn_accuracy']:.3f}",
        flush=True,
    )


def attn_argmax_rate(cfg, model, cache, utts):
    hits = total = 0
    tcfg = cfg.transducer_config()
    for utt in utts:
        if not utt.is_true_ww or utt.ww_end_frame < 0:
            continue
        stream = rt.AudioStream(utt.utt_id, utt.frames, utt.ww_end_frame)
        trace = rt.attention_trace(stream, model, cache, mode="dual-attn")
        n_lead = tcfg.reduced_len(utt.ww_end_frame + 1)
        row_idx = next(i for i, e in enumerate(cache.entries) if e.surface == utt.spoken_ww)
        for t in range(n_lead):
            total += 1
            hits += int(np.argmax(trace[t])) == row_idx
    return hits / total if total else float("nan")


def run(noise, lr, pre_epochs, ft_lr, ft_epochs, n=240, seed=1234, batch=8):
    cfg = make_config(
        {
            "n_utterances": n,
            "noise_std": noise,
            "learning_rate": lr,
            "finetune_learning_rate": ft_lr,
            "pretrain_epochs": pre_epochs,
            "finetune_epochs": ft_epochs,
            "seed": seed,
            "batch_size": batch,
        }
    )
    corpus = generate_corpus(cfg.corpus_spec())
    model = build_model(cfg)
    t0 = time.time()
    hist = train.pretrain(model, corpus.train, cfg.train_config("pretrain"))
    print(f"pretrain {time.time()-t0:.0f}s loss tail {[round(h,3) for h in hist[-3:]]}", flush=True)

    recs, _ = decode_utterances(cfg, model, corpus.heldout, None, mode="pretrained-base")
    base = evaluate_decodes(cfg, corpus.heldout, {r["id"]: r for r in recs})
    summarize("base", base)

    entries = catalog_entries(cfg)
    t0 = time.time()
    ft_hist = train.finetune_biasing(
        model, corpus.train, entries, cfg.train_config("finetune-biasing")
    )
    print(f"finetune {time.time()-t0:.0f}s loss tail {[round(h,3) for h in ft_hist[-3:]]}", flush=True)
    cache = bi.build_catalog_cache(entries, model.biasing)
    recs, _ = decode_utterances(cfg, model, corpus.heldout, cache, mode="dual-attn")
    ft = evaluate_decodes(cfg, corpus.heldout, {r["id"]: r for r in recs})
    summarize("ft  ", ft)

    f1r = (ft["overall"]["f1"] - base["overall"]["f1"]) / max(base["overall"]["f1"], 1e-9)
    gw = (ft["general_wer"] - base["general_wer"]) / max(base["general_wer"], 1e-9)
    rate = attn_argmax_rate(cfg, model, cache, corpus.heldout)
    print(
        f"  -> F1R={f1r:+.3f} general_wer_rel={gw:+.4f} "
        f"pnacc {base['pn_accuracy']:.3f}->{ft['pn_accuracy']:.3f} attn_argmax={rate:.3f}",
        flush=True,
    )


if __name__ == "__main__":
    a = sys.argv[1:]
    run(
        float(a[0]),
        float(a[1]),
        int(a[2]),
        float(a[3]),
        int(a[4]),
        n=int(a[5]) if len(a) > 5 else 240,
        seed=int(a[6]) if len(a) > 6 else 1234,
        batch=int(a[7]) if len(a) > 7 else 8,
    )
