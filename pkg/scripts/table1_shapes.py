"""Build a full-size preset, run one forward pass and report the parameter count."""
import argparse
import json
import resource
import time

from pbmrc.model import PRESETS, forward, init_params, param_count, preset
from pbmrc.prompting import build_instances
from pbmrc.synthetic import synthetic_corpus, synthetic_registry, synthetic_vocab
from pbmrc.tensor import Rng
from pbmrc.tokenizer import encode_instance

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="table1-base")
    args = ap.parse_args()
    t0 = time.perf_counter()
    cfg = preset(args.preset)
    params = init_params(cfg, Rng(0))
    corpus, registry = synthetic_corpus(), synthetic_registry()
    vocab = synthetic_vocab(corpus, registry)
    inst = build_instances(corpus, registry)[1]
    enc = encode_instance(inst, vocab, cfg.max_position_embeddings).enc
    scores = forward(params.nodes(set()), enc, cfg, "hard", inst.label)
    print(json.dumps({"preset": args.preset, "params": params.num_params(), "analytic": param_count(cfg),
                      "seq_len": enc.length, "match_logits": list(scores.match_logits.shape),
                      "seconds": round(time.perf_counter() - t0, 1),
                      "max_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss // 1024}))
