"""Per-round detect-and-prune loop with incremental training.

A ``PipelineState`` owns the detector parameters for one stream of
episodes. Within an episode each round is ingested as a snapshot, the
detector is fine-tuned on the merged history (minus previously pruned
agents), the current round is reconstructed and scored, and at most one
agent is pruned. Parameters persist across rounds and, by default, across
episodes of the stream; the graph is rebuilt fresh per episode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .anomaly import AnomalyScore, DetectionPolicy, prune, score_nodes, select_anomalies
from .detector import (
    DetectorConfig,
    LossBreakdown,
    fit,
    infer,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .graph import (
    AgentId,
    GraphError,
    HistoryBatch,
    TemporalGraph,
    build_snapshot,
    merge_history,
    truncate_history,
)
from .seeding import derive_rng

__all__ = ["PipelineError", "EpisodeExhausted", "Decision", "PipelineState", "run_stream"]


class PipelineError(RuntimeError):
    pass


class EpisodeExhausted(PipelineError):
    """All agents were pruned; the episode cannot continue."""


@dataclass(frozen=True)
class Decision:
    round: int
    removed: AgentId | None
    scores: list[AnomalyScore]
    consensus_reached: bool
    losses: LossBreakdown


class PipelineState:
    def __init__(
        self,
        det_cfg: DetectorConfig,
        policy: DetectionPolicy,
        embed_fn: Callable[[str], np.ndarray],
        seed: int | None = None,
        carry_params: bool = True,
        history_window: int | None = None,
    ) -> None:
        self.det_cfg = det_cfg
        self.policy = policy
        self.embed_fn = embed_fn
        self.seed = det_cfg.seed if seed is None else seed
        self.carry_params = carry_params
        self.history_window = history_window
        self.params = init_params(det_cfg, derive_rng(self.seed, "init"))
        self.noise_rng = derive_rng(self.seed, "noise")
        self.graph = TemporalGraph()
        self.round = 0
        self.decisions: list[Decision] = []
        self._fitted_once = False
        self._episode_index = -1

    def save(self, path) -> None:
        """Checkpoint the detector at a stream boundary."""
        save_checkpoint(path, self.det_cfg, self.params)

    @classmethod
    def from_checkpoint(
        cls,
        path,
        policy: DetectionPolicy,
        embed_fn: Callable[[str], np.ndarray],
        seed: int | None = None,
        carry_params: bool = True,
        history_window: int | None = None,
    ) -> "PipelineState":
        det_cfg, params = load_checkpoint(path)
        state = cls(
            det_cfg,
            policy,
            embed_fn,
            seed=seed,
            carry_params=carry_params,
            history_window=history_window,
        )
        state.params = params
        return state

    def begin_episode(self) -> None:
        """Fresh graph and round counter; parameters persist unless carry is off."""
        self._episode_index += 1
        self.graph = TemporalGraph()
        self.round = 0
        if not self.carry_params:
            ep = self._episode_index
            self.params = init_params(self.det_cfg, derive_rng(self.seed, "init", ep))
            self.noise_rng = derive_rng(self.seed, "noise", ep)
            self._fitted_once = False

    def active_agents(self) -> list[AgentId] | None:
        if self.round == 0:
            return None
        return self.graph.active_agents(self.round)

    def _assemble_batch(self) -> HistoryBatch:
        batch = merge_history(self.graph, self.round)
        if self.det_cfg.variant == "static":
            return truncate_history(batch, 1)
        if self.history_window is not None:
            return truncate_history(batch, self.history_window)
        return batch

    def ingest_round(
        self,
        responses: Sequence[tuple[AgentId, str]],
        topology: Mapping[AgentId, Sequence[AgentId]] | None,
        consensus_reached: bool,
    ) -> Decision:
        """Snapshot, fine-tune, score, and possibly prune one agent.

        `responses` must cover exactly the agents still active; an empty
        round signals an exhausted episode.
        """
        if not responses:
            raise EpisodeExhausted(f"no active agents at round {self.round + 1}")
        expected = self.active_agents()
        if expected is not None:
            got = sorted(a for a, _ in responses)
            still_active = sorted(a for a in expected if a not in self.graph.removed)
            if got != still_active:
                raise PipelineError(
                    f"round {self.round + 1} responses {got} do not match active set {still_active}"
                )

        round_ = self.round + 1
        snapshot = build_snapshot(round_, responses, topology, self.embed_fn)
        try:
            self.graph.append_snapshot(snapshot)
        except GraphError as err:
            raise PipelineError(str(err)) from err
        self.round = round_

        batch = self._assemble_batch()
        epochs = (
            self.det_cfg.epochs_incremental if self._fitted_once else self.det_cfg.epochs_initial
        )
        trace = fit(batch, self.det_cfg, self.params, self.noise_rng, epochs=epochs)
        self._fitted_once = True

        recon, losses = infer(batch, self.det_cfg, self.params)
        scores = score_nodes(recon, self.det_cfg.alpha)
        selected = select_anomalies(scores, self.policy, consensus_reached)
        prune(self.graph, selected, round_, scores)

        removed = min(selected) if selected else None
        decision = Decision(
            round=round_,
            removed=removed,
            scores=scores,
            consensus_reached=consensus_reached,
            losses=trace[-1] if trace else losses,
        )
        self.decisions.append(decision)
        return decision


def run_stream(
    state: PipelineState,
    tasks: Sequence,
    episode_runner: Callable[[object, PipelineState], object],
) -> list:
    """Run episodes sequentially, carrying detector parameters across them."""
    if not tasks:
        raise PipelineError("run_stream requires at least one task")
    results = []
    for task in tasks:
        state.begin_episode()
        results.append(episode_runner(task, state))
    return results
