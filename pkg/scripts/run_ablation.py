#!/usr/bin/env python3
"""Seven-row ablation grid on a synthetic clue corpus.

Example:
    python scripts/run_ablation.py --clue speaker --seeds 0 1 2 --out runs/ablation
"""

import argparse
import json
import time
from pathlib import Path

from dialoguecrn.evaluation import ablation_table, cell_dict, run_ablation_grid, workers_from_env
from dialoguecrn.model import ModelConfig
from dialoguecrn.synth import SynthSpec, synth_embeddings, synth_generate
from dialoguecrn.training import TrainConfig


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clue", choices=("speaker", "situation"), default="speaker")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--conversations", type=int, default=250, help="total; the last fifth is validation")
    ap.add_argument("--length", type=int, default=12)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--d-u", type=int, default=32)
    ap.add_argument("--embedding-dim", type=int, default=50)
    ap.add_argument("--turns", type=int, nargs=2, default=(2, 2), metavar=("T_S", "T_V"))
    ap.add_argument("--workers", type=int, default=None, help="defaults to CRN_THREADS")
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    return ap.parse_args()


def main():
    args = parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for seed in args.seeds:
        spec = SynthSpec(n_conversations=args.conversations, length=args.length,
                         clue_kind=args.clue, seed=seed)
        convs = synth_generate(spec)
        n_train = int(round(0.8 * len(convs)))
        base = ModelConfig(n_outputs=spec.n_classes, d_u=args.d_u, embedding_dim=args.embedding_dim,
                           n_maps=16, layers=1, turns_s=args.turns[0], turns_v=args.turns[1], init_seed=seed)
        tc = TrainConfig(max_epochs=args.epochs, patience=min(20, args.epochs - 1), seed=seed)
        start = time.perf_counter()
        rows = run_ablation_grid(base, tc, convs[:n_train], convs[n_train:],
                                 synth_embeddings(spec, args.embedding_dim),
                                 workers=args.workers or workers_from_env())
        table = ablation_table(rows)
        print(f"# {args.clue} corpus, seed {seed}, {time.perf_counter() - start:.0f}s")
        print(table)
        (args.out / f"ablation_{args.clue}_{seed}.csv").write_text(table)
        summary[seed] = [cell_dict(r) for r in rows]
    (args.out / f"ablation_{args.clue}.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
