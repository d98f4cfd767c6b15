"""Independent reference implementations used to check the real ones.

The brute-force router enumerates every feasible simple path, so it is
obviously correct (for the tie-break order: earliest arrival, then fewest
hops, then lexicographically smallest first hop) and exponentially slow.
Walks that revisit a node never beat their cycle-free shortcut on that
order, so restricting to simple paths is sound.
"""

import random

from dtnode.bdm.contact import ContactPlanEntry


def brute_force_earliest_arrival(plan, source, dest, t0):
    if source == dest:
        return (source, t0)
    by_node = {}
    for entry in plan:
        by_node.setdefault(entry.from_node, []).append(entry)
    outcomes = []

    def walk(node, t, hops, first, visited):
        for entry in by_node.get(node, ()):
            if t > entry.end or entry.to_node in visited:
                continue
            arrival = max(t, entry.start) + entry.owlt
            head = first if first is not None else entry.to_node
            if entry.to_node == dest:
                outcomes.append((arrival, hops + 1, head))
            else:
                walk(entry.to_node, arrival, hops + 1, head,
                     visited | {entry.to_node})

    walk(source, t0, 0, None, {source})
    if not outcomes:
        return None
    arrival, _, first = min(outcomes)
    return (first, arrival)


def random_plan(rng: random.Random, max_nodes: int = 5, max_contacts: int = 8):
    """A random contact plan plus a query against it."""
    names = rng.sample(["A", "B", "C", "D", "E"], rng.randint(2, max_nodes))
    plan = []
    for _ in range(rng.randint(0, max_contacts)):
        frm, to = rng.sample(names, 2)
        start = rng.randint(0, 99)
        end = rng.randint(start + 1, 100)
        plan.append(ContactPlanEntry(frm, to, start, end, owlt=rng.randint(0, 5)))
    source, dest = rng.sample(names, 2)
    t0 = rng.randint(0, 100)
    return plan, source, dest, t0
