"""Checking reverse-mode gradients against finite differences.

``fd_check`` perturbs every element of every input, twice, and compares
the central difference with what the tape computed.  The registry then
scales that to whole subsystems: each named kernel rebuilds a random
instance per trial and keeps the worst relative error seen.
"""

import numpy as np

from personcap import autodiff as ad
from personcap.gradcheck import KERNELS, fd_check, run_kernel

# ---------------------------------------------------------------------------
# a one-off check of a hand-written function

rng = np.random.default_rng(7)


def fn(w, x):
    # softmax cross-ish score: scalar output is required
    return ad.sum_all(ad.mul(ad.softmax(ad.matmul(x, w), axis=-1),
                             ad.tanh(ad.matmul(x, w))))


result = fd_check(fn, {"w": rng.standard_normal((4, 3)) * 0.5,
                       "x": rng.standard_normal((2, 4))})
print(f"hand-written fn: max relative error {result.max_rel_err:.2e}")
for name, err in sorted(result.per_input.items()):
    print(f"  d/d{name}: {err:.2e}")

# ---------------------------------------------------------------------------
# the registered kernels, a few trials each

print(f"\n{len(KERNELS)} registered kernels (3 trials each here; the")
print("acceptance gate runs 100):")
for name in sorted(KERNELS):
    kernel = KERNELS[name]
    worst = run_kernel(name, trials=3, seed=0).max_rel_err
    verdict = "ok" if worst < kernel.tol else "FAIL"
    print(f"  {name:24s} worst {worst:10.2e}  tol {kernel.tol:.0e}  {verdict}")

print("\nthe same table is available from the command line:")
print("  personcap gradcheck --trials 3 --out /tmp/gradcheck.txt")
