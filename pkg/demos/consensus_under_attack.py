"""Run each consensus variant against each attack and report safety and progress."""

from shardchain.consensus import Variant
from shardchain.simnet.scenarios import ATTACKS, run_consensus_trace

print("%-8s %-12s %4s %4s %6s %9s %5s" % ("variant", "attack", "n", "f", "safe", "executed", "vcs"))
for variant in Variant:
    for attack in ATTACKS + ("crash_leader",):
        o = run_consensus_trace(variant, seed=1, attack=attack, requests=20)
        print("%-8s %-12s %4d %4d %6s %9s %5d" % (variant.value, attack, o.n, o.f, o.safe, o.executed_all,
                                                  o.view_changes))
