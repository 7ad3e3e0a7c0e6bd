"""Independent reference implementations used to cross-check the package.

These are deliberately written with different algorithms than the
production code so a shared bug cannot hide in both sides.
"""

from __future__ import annotations

import itertools


def oracle_expand(expr: str) -> list[str]:
    """Reference hostlist expansion: token-at-a-time, no regex."""
    parts: list[str] = []
    buf = ""
    bracket = False
    for ch in expr.strip():
        if ch == "[":
            bracket = True
            buf += ch
        elif ch == "]":
            bracket = False
            buf += ch
        elif ch == "," and not bracket:
            parts.append(buf)
            buf = ""
        else:
            buf += ch
    parts.append(buf)

    names: list[str] = []
    for part in parts:
        if "[" not in part:
            names.append(part)
            continue
        prefix, _, rest = part.partition("[")
        body = rest[: rest.index("]")]
        for token in body.split(","):
            if "-" in token:
                lo_s, _, hi_s = token.partition("-")
            else:
                lo_s = hi_s = token
            width = len(lo_s)
            for value in range(int(lo_s), int(hi_s) + 1):
                names.append(prefix + str(value).rjust(width, "0"))
    return names


def oracle_verdict(
    node_health: dict[str, bool],
    flexible: bool,
    min_nodes: int,
    max_exclusion_fraction: float,
) -> tuple[str, frozenset[str]]:
    """Brute-force verdict: classify nodes independently, apply the guards.

    node_health maps node id -> True when the node counts healthy.
    Returns (decision, excluded set) with decision in
    {"continue", "abort", "continue-excluding"}.
    """
    unhealthy = frozenset(n for n, ok in node_health.items() if not ok)
    if not unhealthy:
        return "continue", frozenset()
    healthy_count = len(node_health) - len(unhealthy)
    if not flexible:
        return "abort", frozenset()
    if healthy_count < min_nodes:
        return "abort", frozenset()
    if len(unhealthy) / len(node_health) > max_exclusion_fraction:
        return "abort", frozenset()
    return "continue-excluding", unhealthy


def oracle_ring_node_bandwidth(
    order: list[str], links: dict[frozenset[str], float], node: str
) -> float:
    """Per-node ring diagnostic: min bandwidth over the node's two hops."""
    if len(order) == 1:
        raise ValueError("loopback handled separately")
    idx = order.index(node)
    left = order[(idx - 1) % len(order)]
    right = order[(idx + 1) % len(order)]
    hops = {frozenset((left, node)), frozenset((node, right))}
    return min(links[h] for h in hops)


def oracle_weighted_score(
    compute: float, memory: float, network: float, weights: tuple[float, float, float]
) -> float:
    return weights[0] * compute + weights[1] * memory + weights[2] * network


def all_health_assignments(nodes: list[str], states: tuple[str, ...]):
    """Every assignment of per-node states, as dicts."""
    for combo in itertools.product(states, repeat=len(nodes)):
        yield dict(zip(nodes, combo))
