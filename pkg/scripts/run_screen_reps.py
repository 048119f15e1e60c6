"""Repeated planted-effect screens on freshly generated claims corpora.

Drug 0 carries an all-negative effect, drug 1 a mixed-sign effect, the rest none.

    python scripts/run_screen_reps.py --reps 5 --n-trials 20 --out results/screens.json
"""
import argparse
import json
import time
from pathlib import Path

from stedr import benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=5, help="repetitions, corpus seeds 0..N-1 (default 5)")
    p.add_argument("--n-trials", type=int, default=20, help="trials per drug (default 20)")
    p.add_argument("--n-drugs", type=int, default=10, help="drugs screened (default 10)")
    p.add_argument("--workers", type=int, help="parallel processes per screen")
    p.add_argument("--out", default="results/screens.json", help="JSON results path")
    args = p.parse_args()

    reps = []
    for rep in range(args.reps):
        start = time.perf_counter()
        verdicts, report = benchmark.screen_repetition(rep, n_trials=args.n_trials,
                                                       n_drugs=args.n_drugs, workers=args.workers)
        seconds = time.perf_counter() - start
        reps.append({"rep": rep, "seconds": seconds, "digest": report.digest(),
                     "verdicts": {str(d): v for d, v in verdicts.items()}})
        scored = {d: verdicts.get(d) for d in benchmark.EXPECTED_VERDICTS}
        print(f"rep {rep}: {scored} ({seconds / 60:.1f} min)", flush=True)

    rates = benchmark.verdict_rates([{int(d): v for d, v in r["verdicts"].items()} for r in reps])
    for drug, rate in rates.items():
        want = benchmark.EXPECTED_VERDICTS[drug]
        print(f"drug {drug}: expected {want} in {rate:.0%} of repetitions "
              f"(required {benchmark.REQUIRED_RATES[want]:.0%})")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"n_trials": args.n_trials, "rates": rates, "reps": reps},
                              indent=1) + "\n")


if __name__ == "__main__":
    main()
