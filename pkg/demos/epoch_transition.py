"""Swap a committee's members in small batches versus all at once, and watch per-second throughput."""

from shardchain.simnet.scenarios import epoch_transition_scenario

for mode in ("batched", "naive"):
    o = epoch_transition_scenario(seed=0, n=16, mode=mode)
    print("%-7s B=%-2d transition %.0f-%.0fs, zero windows %d" % (mode, o.B, o.transition_start, o.transition_end,
                                                                  o.zero_windows))
    print("        " + " ".join("%4.0f" % x for x in o.series))
