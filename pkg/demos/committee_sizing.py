"""How large must a randomly sampled committee be?

Prints the smallest committee size whose chance of exceeding its fault
budget stays under 2^-20, for a few network sizes and adversary shares,
then the failure bound for a batched committee swap.
"""

from shardchain.shardform import SizingQuery, faulty_committee_probability, min_committee_size, \
    transition_failure_probability

for N in (1000, 10000):
    for s in (0.125, 0.25):
        for res in ("half", "third"):
            r = min_committee_size(SizingQuery(N, s, res))
            print("N=%-6d adversary=%.3f %-5s -> n=%-4d f=%-4d tail=%.2e" % (N, s, res, r.n, r.f, r.failure_probability))

n = 80
f = (n - 1) // 2
print("\nsingle committee of 80 at N=1000, s=0.25: %.2e" % faulty_committee_probability(1000, 250, n, f + 1))
print("10 committees swapped in batches of 6:     %.2e" % transition_failure_probability(1000, 250, n, f + 1, 10, 6))
