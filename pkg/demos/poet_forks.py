"""Stale blocks under plain PoET and under PoET+ (only about sqrt(n) enclaves compete per round)."""

from shardchain.poet import compare_poet

res = compare_poet(n=128, seeds=range(10), rounds=200)
print("mean stale rate  PoET  %.3f" % res["poet"])
print("mean stale rate  PoET+ %.3f" % res["poet_plus"])
print("one-sided Welch p = %.2e" % res["p_value"])
