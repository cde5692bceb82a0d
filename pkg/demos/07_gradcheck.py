"""The gradient verification suite: finite differences for smooth ops, the
exact-linear magnitude check, and the STE rules against a scalar oracle."""

from dlqat.gradcheck import run_all

results = run_all(seed=0)
for r in results:
    print(r.line())
print("all passed" if all(r.passed for r in results) else "FAILURES")
