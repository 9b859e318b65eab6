"""Train a small agent on chain arithmetic, then debate in hybrid and text mode.

Prints accuracy and communication tokens per question for both channels.
Run: python demos/hybrid_vs_text.py --steps 600
"""
import argparse

from hylat.evaluation import EvalConfig, run_mad
from hylat.model import ModelConfig, TinyTransformer
from hylat.stage1 import Stage1Config, train_stage1
from hylat.tasks import ChainArithmetic, gen_stage1
from hylat.vocab import VOCAB


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--questions", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    fam = ChainArithmetic(steps=2, modulus=10)
    test = gen_stage1(fam, 99, args.questions)
    held = {tuple(s.x) for s in test}
    train = [s for s in gen_stage1(fam, args.seed, 10_000) if tuple(s.x) not in held]

    model = TinyTransformer(ModelConfig(vocab_size=len(VOCAB), d_model=64, seed=args.seed))
    cfg = Stage1Config(steps=args.steps, beta=10.0, seed=args.seed)
    hist, _ = train_stage1(model, train, cfg,
                           progress=lambda step, bd, _opt: step % 100 == 0 and print(
                               f"step {step:5d}  hybrid {bd.l_hybrid:.3f}  text {bd.l_text:.3f}"
                               f"  align {bd.l_align:.3f}"))

    print(f"\n{'channel':8s} {'avg acc':>8s} {'maj acc':>8s} {'tokens/q':>9s}")
    for comp in ("hybrid", "text"):
        m = run_mad(model, test, EvalConfig(num_agents=3, num_rounds=2, composition=comp)).metrics
        print(f"{comp:8s} {m.avg_accuracy:8.3f} {m.maj_accuracy:8.3f} {m.tokens_per_question:9.1f}")


if __name__ == "__main__":
    main()
