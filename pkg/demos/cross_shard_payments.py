"""Cross-shard payments through the reference committee, with a client that walks away mid-transaction."""

from shardchain.bench.runner import isolation_check, run_xshard_case
from shardchain.bench.serializability import check_serializability, split_payment_history

for seed in (0, 3, 6, 9):
    o = run_xshard_case(seed, cross=True, force_stalling=(seed == 3))
    iso = isolation_check(o.history)
    print("seed %d: %d shards, begun %d, committed %d, aborted %d, stalling client=%s, atomic=%s, "
          "serializable=%s, balance %d -> %d" % (seed, o.num_shards, o.begun, o.committed, o.aborted, o.stalling,
                                                 o.atomicity.ok, iso.serializable, o.balance_before,
                                                 o.balance_after))

v = check_serializability(split_payment_history())
print("\nsplit payment without coordination: serializable=%s, cycle=%s" % (v.serializable, v.cycle))
