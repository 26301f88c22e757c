#!/usr/bin/env python3
"""Finite-difference check of every model parameter on a small toy conversation.

Example:
    python scripts/gradcheck_model.py --d-u 8 --layers 1          # every coordinate (about a minute)
    python scripts/gradcheck_model.py --max-coords 64 --head regression
"""

import argparse
import time

import numpy as np

from dialoguecrn.corpus import Conversation, EmbeddingTable, Utterance
from dialoguecrn.gradcheck import check_params
from dialoguecrn.model import DialogueCRN, ModelConfig

WORDS = ("hello", "there", "fine", "thanks", "really", "no", "yes", "maybe")


def toy(rng, head, n_outputs, speakers="ABA"):
    utts = []
    for s in speakers:
        tokens = tuple(rng.choice(WORDS, size=int(rng.integers(2, 6))))
        if head == "categorical":
            utts.append(Utterance(s, tokens=tokens, label=int(rng.integers(n_outputs))))
        else:
            utts.append(Utterance(s, tokens=tokens, attrs=tuple(rng.normal(size=n_outputs))))
    return Conversation("toy", tuple(utts), tuple(sorted(set(speakers))))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d-u", type=int, default=8)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--turns", type=int, nargs=2, default=(2, 2), metavar=("T_S", "T_V"))
    ap.add_argument("--head", choices=("categorical", "regression"), default="categorical")
    ap.add_argument("--max-coords", type=int, default=None, help="sample at most this many per tensor")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n_out = 3 if args.head == "categorical" else 2
    table = EmbeddingTable(5, WORDS, rng.normal(size=(len(WORDS), 5)))
    config = ModelConfig(n_outputs=n_out, head=args.head, d_u=args.d_u, embedding_dim=5, n_maps=2,
                         layers=args.layers, turns_s=args.turns[0], turns_v=args.turns[1],
                         dropout=0.0, init_seed=args.seed)
    model = DialogueCRN(config, table)
    for name, p in model.params.items():
        if name.endswith(".b"):  # keep all-padding conv windows off the ReLU kink
            p.data += rng.normal(scale=0.1, size=p.shape)
    conv = toy(rng, args.head, n_out)
    start = time.perf_counter()
    report = check_params(lambda: model.loss([conv]), model.params, max_coords=args.max_coords, rng=rng)
    total = sum(p.size for p in model.params.values())
    print(f"{report.rel_err.size}/{total} coordinates in {time.perf_counter() - start:.1f}s")
    print(f"max relative error {report.max_rel_err:.3e} at {report.worst()[0]}")
    print("PASS" if report.max_rel_err < 1e-3 else "FAIL")


if __name__ == "__main__":
    main()
