"""Write the synthetic desk dataset (corpus, vocab, templates, run config).

    python3 scripts/make_desk_data.py data/desk
    pbmrc train --config data/desk/config.json --out runs/desk
"""
import argparse
import json

from pbmrc.synthetic import write_desk_data

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", nargs="?", default="data/desk")
    ap.add_argument("--sentences", type=int, default=40)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    print(json.dumps(write_desk_data(args.out_dir, args.sentences, args.seed), indent=2))
