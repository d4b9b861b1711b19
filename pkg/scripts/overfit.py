"""Overfit runs on the 40-sentence synthetic corpus (dev = train).

Hard prompts train the whole desk model from scratch. The soft run then
freezes that encoder, re-initialises the span heads and trains prompts and
heads only (``prompt_and_heads``). ``--cold-soft`` additionally runs the soft
configuration on a randomly initialised, frozen encoder for comparison.
"""
import argparse
import json
import time

from pbmrc.model import SOFT_PREFIX, init_params, preset
from pbmrc.synthetic import synthetic_corpus, synthetic_registry, synthetic_vocab
from pbmrc.tensor import Rng
from pbmrc.training import TrainConfig, train


def progress(tag, every):
    def cb(rec):
        if rec["epoch"] % every == 0:
            print(f"{tag} epoch {rec['epoch']:4d} loss {rec['total_loss']:.4f} dev F1 {rec['dev_f1']:.4f}", flush=True)
    return cb


def run(tag, corpus, registry, vocab, cfg, tc, init=None, every=10):
    t0 = time.perf_counter()
    res = train(corpus, corpus, registry, vocab, cfg, tc, init=init, on_epoch=progress(tag, every))
    best = res.log[res.best_epoch - 1]
    print(json.dumps({"run": tag, "best_epoch": res.best_epoch, "epochs_run": len(res.log),
                      "dev_f1": best["dev_f1"], "dev_precision": best["dev_precision"],
                      "seconds": round(time.perf_counter() - t0, 1)}), flush=True)
    return res


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--cold-soft", action="store_true")
    args = ap.parse_args()

    corpus = synthetic_corpus()
    registry = synthetic_registry()
    vocab = synthetic_vocab(corpus, registry)
    cfg = preset("desk", vocab_size=len(vocab))
    common = dict(batch_size=8, learning_rate=args.lr, seed=args.seed, max_len=64)

    hard = run("hard", corpus, registry, vocab, cfg, TrainConfig(max_epochs=300, target_metric=0.99, **common))

    soft_tc = TrainConfig(max_epochs=500, target_metric=0.90, prompt_mode="soft",
                          freeze_policy="prompt_and_heads", **common)
    init = hard.checkpoint.params.copy()
    fresh = init_params(cfg, Rng(7))
    for name in list(init.arrays):
        if name.startswith("head."):
            init.arrays[name] = fresh.arrays[name].copy()
        elif name.startswith(SOFT_PREFIX):
            del init.arrays[name]  # re-seeded from the trained token embeddings
    run("soft-warm", corpus, registry, vocab, cfg, soft_tc, init=init)

    if args.cold_soft:
        run("soft-cold", corpus, registry, vocab, cfg, soft_tc, every=25)
