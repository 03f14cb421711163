"""Reconstruction residuals -> per-node scores -> pruning decisions.

A node's score mixes its attribute and structure residual row norms with
the same alpha that weights the training loss. Selection is conservative:
at most one agent per round in every policy mode, ties broken by lowest
agent id for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Reconstruction
from .graph import AgentId, TemporalGraph

__all__ = ["AnomalyScore", "DetectionPolicy", "PolicyError", "score_nodes", "select_anomalies", "prune"]

POLICY_MODES = ("top1_on_no_consensus", "top1_always", "threshold")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalyScore:
    agent: AgentId
    round: int
    value: float


@dataclass(frozen=True)
class DetectionPolicy:
    mode: str = "top1_on_no_consensus"
    tau: float = 0.0
    max_removals_per_round: int = 1

    def __post_init__(self) -> None:
        if self.mode not in POLICY_MODES:
            raise PolicyError(f"unknown policy mode {self.mode!r}")
        if self.mode == "threshold" and self.tau < 0.0:
            raise PolicyError(f"threshold mode requires tau >= 0, got {self.tau}")
        if self.max_removals_per_round != 1:
            raise PolicyError("only one removal per round is supported")


def score_nodes(recon: Reconstruction, alpha: float) -> list[AnomalyScore]:
    """s_i = alpha * ||attribute residual row i|| + (1-alpha) * ||structure residual row i||."""
    att = np.linalg.norm(recon.r_x.data, axis=1)
    stru = np.linalg.norm(recon.r_e.data, axis=1)
    values = alpha * att + (1.0 - alpha) * stru
    return [
        AnomalyScore(agent=a, round=recon.round, value=float(v))
        for a, v in zip(recon.agents, values)
    ]


def select_anomalies(
    scores: list[AnomalyScore], policy: DetectionPolicy, consensus_reached: bool
) -> set[AgentId]:
    """At most one agent. Ties go to the lowest agent id."""
    if not scores:
        raise PolicyError("select_anomalies requires at least one score")
    if policy.mode == "top1_on_no_consensus" and consensus_reached:
        return set()
    candidates = scores
    if policy.mode == "threshold":
        candidates = [s for s in scores if s.value > policy.tau]
        if not candidates:
            return set()
    top = max(candidates, key=lambda s: (s.value, -s.agent))
    return {top.agent}


def prune(
    g: TemporalGraph,
    selected: set[AgentId],
    round_: int,
    scores: list[AnomalyScore] | None = None,
) -> None:
    """Remove the selected agents from all rounds after `round_`, logging scores."""
    by_agent = {s.agent: s.value for s in scores or []}
    for agent in sorted(selected):
        g.remove_node(agent, round_, score=by_agent.get(agent))
