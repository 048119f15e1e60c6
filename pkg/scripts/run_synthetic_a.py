"""Seeded Synthetic A benchmark, optionally with the two ablations.

    python scripts/run_synthetic_a.py --seeds 10 --ablations --out results/synthetic_a.json
"""
import argparse
import json
from pathlib import Path

from stedr import benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10, help="number of seeds, 0..N-1 (default 10)")
    p.add_argument("--ablations", action="store_true", help="also run w/o mixture and w/o attention")
    p.add_argument("--n", type=int, default=1000, help="samples per draw (default 1000)")
    p.add_argument("--out", default="results/synthetic_a.json", help="JSON results path")
    args = p.parse_args()

    variants = list(benchmark.VARIANTS) if args.ablations else ["full"]
    results = []
    for variant in variants:
        for seed in range(args.seeds):
            r = benchmark.run_synthetic_a(seed, variant, n=args.n)
            results.append(r)
            print(f"{variant:13s} seed {seed}: pehe {r.pehe:.4f}  eps_ate {r.eps_ate:.4f}  "
                  f"v_within {r.v_within:.3f}  v_across {r.v_across:.3f}  ({r.seconds:.0f}s)",
                  flush=True)

    summary = benchmark.summarize(results)
    for variant, s in summary.items():
        print(f"{variant:13s} mean: pehe {s['pehe']:.4f}  eps_ate {s['eps_ate']:.4f}  "
              f"v_within {s['v_within']:.3f}  v_across {s['v_across']:.3f}")
    for variant in variants[1:]:
        wins = benchmark.paired_wins(results, variant)
        print(f"full beats {variant} on {wins}/{args.seeds} seeds")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config": benchmark.SYNTHETIC_A_CONFIG, "summary": summary,
                               "runs": benchmark.as_rows(results)}, indent=1) + "\n")


if __name__ == "__main__":
    main()
