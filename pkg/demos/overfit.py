"""
Overfitting a handful of pairs
==============================

Train the desk-scale network on eight fixed pairs and evaluate on the same
pairs. A healthy pipeline drives both mIoU and F-measure close to 1.

    python demos/overfit.py [iterations]

500 iterations take roughly 13 minutes on one CPU core.
"""
import sys
import time

from roimatch.experiments import TOY_CONFIG, loss_trend_violations, overfit

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500

t0 = time.perf_counter()
run = overfit(TOY_CONFIG, iterations=iterations)
losses = [r["total"] for r in run.log]

for r in run.log[:: max(1, iterations // 10)]:
    print(f"iter {r['iteration']:4d}  loss {r['total']:.4f}")
print(f"mIoU {run.report.miou:.3f}  F {run.report.f_measure:.3f}  counts {run.report.counts}")
print(f"loss trend violations: {len(loss_trend_violations(losses))}")
print(f"elapsed {time.perf_counter() - t0:.0f} s")
