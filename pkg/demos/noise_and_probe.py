"""Noise robustness sweep and latent probing on a checkpoint.

Run after training, e.g.
  hylat gen-data --family chain --count 5000 --out runs/chain
  hylat train-stage1 --data runs/chain/dataset.jsonl --beta 10 --out runs/s1
  python demos/noise_and_probe.py --checkpoint runs/s1/checkpoint.hylt
"""
import argparse

import numpy as np

from hylat.evaluation import EvalConfig, run_mad
from hylat.model import load_checkpoint
from hylat.probe import attention_report, cluster_separation, collect_final_latents, pca
from hylat.tasks import ChainArithmetic, MultiHopLookup, gen_stage1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--questions", type=int, default=100)
    args = ap.parse_args()

    model, _ = load_checkpoint(args.checkpoint)
    chain = gen_stage1(ChainArithmetic(), 123, args.questions)

    print("sigma  avg acc (mean of 5 noise seeds)")
    for sigma in (0.0, 0.25, 0.5, 1.0, 2.0):
        accs = [run_mad(model, chain, EvalConfig(num_agents=2, sigma=sigma, seed=s)).metrics.avg_accuracy
                for s in range(5 if sigma else 1)]
        print(f"{sigma:5.2f}  {np.mean(accs):.3f}")

    cfg = EvalConfig(num_agents=2, include_latents=True, capture_attention=True)
    runs = {"chain": run_mad(model, chain, cfg),
            "multihop": run_mad(model, gen_stage1(MultiHopLookup(), 123, args.questions), cfg)}
    parts = [collect_final_latents(r.transcript, name) for name, r in runs.items()]
    X = np.concatenate([p[0] for p in parts])
    labels = sum((p[1] for p in parts), [])
    r = pca(X, 2)
    print("\nPCA explained variance:", np.round(r.explained_ratio, 3))
    print(f"cluster separation chain vs multihop: {cluster_separation(r.projections, labels):.2f}")

    print(f"\nround step {'category':24s} mass")
    for rnd, step, cat, mass in attention_report(runs["chain"].traces):
        if step == 0:
            print(f"{rnd:5d} {step:4d} {cat:24s} {mass:.3f}")


if __name__ == "__main__":
    main()
