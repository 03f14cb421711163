"""Acceptance suite: every release criterion at its pinned tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS/FAIL line
per criterion. Budgets are wall-clock upper bounds; the numeric bars are
fixed here and must not be loosened.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np

from guardian.anomaly import DetectionPolicy
from guardian.detector import (
    DetectorConfig,
    compose_losses,
    fit,
    gib_gamma,
    init_params,
    kl_term,
    run_forward,
)
from guardian.embedder import EmbeddingConfig, make_embedder
from guardian.graph import (
    HistoryBatch,
    Snapshot,
    TemporalGraph,
    build_snapshot,
    merge_history,
    normalized_adjacency,
)
from guardian.harness import (
    ExperimentConfig,
    run_experiment,
    validate_episode_json,
)
from guardian.numerics import ParamStore, Tensor2D, grad_check
from guardian.pipeline import PipelineState
from guardian.simulator import AgentSpec, AttackPlan, Task, run_episode

EMBED64 = make_embedder(EmbeddingConfig(dim=64))

# gamma = lambda / (1 + lambda * beta) = 0.005 exactly when lambda = 1/199
BENCH_LAMBDA = 1.0 / 199.0


def _check(criterion: int, description: str, ok: bool, detail: str, elapsed: float, budget: float):
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[criterion {criterion}] {status} {description}: {detail} ({elapsed:.1f}s / {budget:.0f}s budget)")
    assert ok, f"criterion {criterion} failed: {detail}"
    assert elapsed < budget, f"criterion {criterion} over budget: {elapsed:.1f}s >= {budget}s"


def _random_detector_batch(rng, n_agents: int, rounds: int, k: int) -> HistoryBatch:
    snaps = []
    for t in range(1, rounds + 1):
        x = rng.normal(size=(n_agents, k))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        adjacency = np.zeros((n_agents, n_agents), dtype=bool)
        if t > 1:
            adjacency = ~np.eye(n_agents, dtype=bool)
        snaps.append(
            Snapshot(
                round=t,
                agents=list(range(n_agents)),
                features=Tensor2D(x),
                adjacency=adjacency,
                response_texts=["r"] * n_agents,
            )
        )
    presence = {a: [True] * rounds for a in range(n_agents)}
    return HistoryBatch(snapshots=snaps, presence=presence)


def test_criterion_1_gradient_fidelity():
    started = time.perf_counter()
    worst = 0.0
    config_rng = np.random.default_rng(1001)
    for i in range(10):
        n = int(config_rng.integers(2, 6))  # |V| <= 5
        rounds = int(config_rng.integers(1, 4))  # T <= 3
        d = int(config_rng.integers(2, 9))  # d <= 8
        k = int(config_rng.integers(3, 9))
        cfg = DetectorConfig(
            k=k, d=d, alpha=float(config_rng.uniform(0.2, 0.8)), lambda_=float(config_rng.uniform(0.01, 0.5))
        )
        params = init_params(cfg, np.random.default_rng(2000 + i))
        batch = _random_detector_batch(np.random.default_rng(3000 + i), n, rounds, k)

        def term_loss(term):
            def fn(store: ParamStore):
                result = run_forward(batch, cfg, store, rng=None)
                return {
                    "total": result.loss_total,
                    "att": result.l_att,
                    "stru": result.l_stru,
                    "kl": result.kl,
                }[term]

            return fn

        for term in ("total", "att", "stru", "kl"):
            err = grad_check(
                term_loss(term),
                params,
                eps=1e-4,
                rng=np.random.default_rng(4000 + i),
                max_coords_per_param=6,
            )
            worst = max(worst, err)
    elapsed = time.perf_counter() - started
    _check(1, "gradient fidelity (all terms, 10 configs)", worst < 1e-4,
           f"max relative error {worst:.2e} < 1e-4", elapsed, 30.0)


def test_criterion_2_loss_identities():
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_rec = worst_total = worst_gamma = 0.0
    kl_ok = True
    for _ in range(1000):
        l_att = float(rng.uniform(0, 10))
        l_stru = float(rng.uniform(0, 10))
        alpha = float(rng.uniform(0, 1))
        lam = float(rng.uniform(0, 3))
        beta = float(rng.uniform(0.05, 4))
        mean = Tensor2D(rng.normal(size=(3, 4)) * 2)
        logvar = Tensor2D(rng.uniform(-8, 8, size=(3, 4)))
        kl = kl_term(mean, logvar).item()
        kl_ok = kl_ok and kl >= 0.0
        gamma = gib_gamma(lam, beta)
        b = compose_losses(l_att, l_stru, kl, alpha, gamma)
        worst_rec = max(worst_rec, abs(b.l_rec - (alpha * b.l_att + (1 - alpha) * b.l_stru)))
        worst_total = max(worst_total, abs(b.l_total - (b.l_rec + gamma * b.kl)))
        worst_gamma = max(worst_gamma, abs(gamma - lam / (1 + lam * beta)))
    elapsed = time.perf_counter() - started
    ok = worst_rec <= 1e-12 and worst_total <= 1e-12 and worst_gamma <= 1e-15 and kl_ok
    _check(2, "loss identities (1000 random breakdowns)", ok,
           f"rec dev {worst_rec:.1e}, total dev {worst_total:.1e}, gamma dev {worst_gamma:.1e}, kl>=0 {kl_ok}",
           elapsed, 5.0)


def test_criterion_3_analytic_fixtures():
    started = time.perf_counter()
    adjacency = np.array([[False, True], [False, False]])
    snap = Snapshot(
        round=2,
        agents=[0, 1],
        features=Tensor2D(np.zeros((2, 4))),
        adjacency=adjacency,
        response_texts=["a", "b"],
    )
    norm_ok = np.allclose(normalized_adjacency(snap).data, [[0.5, 0.5], [0.5, 0.5]])

    p = Tensor2D(np.full((3, 3), 0.5))
    target = np.eye(3)
    ll = target * np.log(p.data) + (1 - target) * np.log(1 - p.data)
    l_stru = float(-ll.sum() / 9)
    stru_ok = abs(l_stru - math.log(2.0)) <= 1e-9

    kl = kl_term(Tensor2D(np.zeros((4, 6))), Tensor2D(np.zeros((4, 6)))).item()
    kl_ok = kl == 0.0
    elapsed = time.perf_counter() - started
    _check(3, "analytic fixtures", norm_ok and stru_ok and kl_ok,
           f"adjacency {norm_ok}, l_stru=ln2 {stru_ok}, kl==0 {kl_ok}", elapsed, 1.0)


def _clean_fixture_batch() -> HistoryBatch:
    """The fixed 4-agent, 3-round clean debate graph (seeded once)."""
    task = Task(id="fixture", question="What is 3 plus 5?", answer_space=("8", "15", "21", "4"), correct="8")
    specs = [AgentSpec(id=i) for i in range(4)]
    log = run_episode(task, specs, 1.0, AttackPlan(), max_rounds=3, min_rounds=3, seed=2024)
    g = TemporalGraph()
    for rec in log.rounds:
        topo = {}
        if rec.t > 1:
            topo = {}
            for src, dst in rec.edges:
                topo.setdefault(dst, []).append(src)
        g.append_snapshot(
            build_snapshot(rec.t, list(zip(rec.agents, rec.responses)), topo, EMBED64)
        )
    return merge_history(g, 3)


def test_criterion_4_training_convergence():
    started = time.perf_counter()
    batch = _clean_fixture_batch()
    converged = 0
    ratios = []
    for seed in range(100):
        cfg = DetectorConfig()
        params = init_params(cfg, np.random.default_rng(10_000 + seed))
        trace = fit(batch, cfg, params, np.random.default_rng(20_000 + seed), epochs=50)
        ratio = trace[-1].l_total / trace[0].l_total
        ratios.append(ratio)
        if ratio < 0.5:
            converged += 1
    elapsed = time.perf_counter() - started
    _check(4, "training convergence (100 seeds, 50 epochs)", converged >= 95,
           f"{converged}/100 halved l_total (median ratio {np.median(ratios):.3f})", elapsed, 120.0)


def test_criterion_5_detection_benchmark():
    started = time.perf_counter()
    gamma = gib_gamma(BENCH_LAMBDA, 1.0)
    assert abs(gamma - 0.005) < 1e-15, "benchmark gamma must be 0.005"
    results = {}
    for attack, min_rounds in (("hallucination", 1), ("agent_targeted", 1), ("comm_targeted", 3)):
        cfg = ExperimentConfig(
            attack=attack,
            n_tasks=100,
            trials=1,
            seed=7,
            alpha=0.4,
            lambda_=BENCH_LAMBDA,
            min_rounds=min_rounds,
            defense=True,
            carry_params=False,
        )
        report, _ = run_experiment(cfg)
        results[attack] = report
    elapsed = time.perf_counter() - started
    ok = True
    details = []
    for attack in ("hallucination", "agent_targeted"):
        r = results[attack]
        ok = ok and r.detection_rate >= 0.80 and r.fdr <= 0.20
        details.append(f"{attack}: det={r.detection_rate:.3f} fdr={r.fdr:.3f}")
    comm = results["comm_targeted"]
    ok = ok and comm.detection_rate is not None and 0.0 <= comm.detection_rate <= 1.0
    details.append(f"comm_targeted: det={comm.detection_rate:.3f} fdr={comm.fdr:.3f} (reported)")
    _check(5, "detection benchmark (100 episodes x 3 attacks)", ok, "; ".join(details), elapsed, 600.0)


def test_criterion_6_propagation_invariants():
    started = time.perf_counter()
    task = Task(id="p0", question="q", answer_space=("8", "15", "21", "4"), correct="8")
    kinds = ("hallucination", "agent_targeted", "comm_targeted")
    fractions = (0.25, 0.5, 0.75, 1.0)
    violations = 0
    episodes = 0
    for seed in range(1000):
        kind = kinds[seed % 3]
        fraction = fractions[seed % 4]
        specs = [AgentSpec(id=i, p_correct=0.8, p_follow=0.7) for i in range(4)]
        log = run_episode(
            task,
            specs,
            fraction,
            AttackPlan(kind=kind, seed=seed),
            max_rounds=4,
            min_rounds=4,
            seed=seed,
        )
        episodes += 1
        for series in (log.ground_truth.h, log.ground_truth.err):
            counts = [sum(row) for row in series]
            if counts != sorted(counts):
                violations += 1
    elapsed = time.perf_counter() - started
    _check(6, "propagation monotonicity (1000 undefended episodes)", violations == 0,
           f"{violations} violations across {episodes} episodes", elapsed, 60.0)


def test_criterion_7_cost_reduction():
    started = time.perf_counter()
    task = Task(id="c0", question="What is 6 plus 7?", answer_space=("13", "31", "17", "5"), correct="13")
    specs = [AgentSpec(id=i) for i in range(4)]
    worst_pairs = []
    for seed in range(50):
        plan = AttackPlan(kind="agent_targeted", seed=seed)
        undefended = run_episode(task, specs, 1.0, plan, max_rounds=3, seed=seed)
        state = PipelineState(
            DetectorConfig(lambda_=BENCH_LAMBDA, seed=seed),
            DetectionPolicy(),
            EMBED64,
            seed=seed,
        )
        state.begin_episode()
        defended = run_episode(task, specs, 1.0, plan, pipeline=state, max_rounds=3, seed=seed)
        if defended.api_calls > undefended.api_calls:
            worst_pairs.append((seed, defended.api_calls, undefended.api_calls))
    elapsed = time.perf_counter() - started
    _check(7, "cost reduction (50 paired seeds)", not worst_pairs,
           f"defended <= undefended api calls in all pairs (violations: {worst_pairs})", elapsed, 300.0)


def test_criterion_8_variant_contract():
    started = time.perf_counter()

    def decisions(variant: str, history_window, seed: int):
        task = Task(id=f"v{seed}", question="q", answer_space=("8", "15", "21", "4"), correct="8")
        specs = [AgentSpec(id=i) for i in range(4)]
        plan = AttackPlan(kind="hallucination", seed=seed)
        state = PipelineState(
            DetectorConfig(variant=variant, lambda_=BENCH_LAMBDA, seed=seed),
            DetectionPolicy(),
            EMBED64,
            seed=seed,
            history_window=history_window,
        )
        state.begin_episode()
        run_episode(task, specs, 1.0, plan, pipeline=state, max_rounds=3, seed=seed)
        return [(d.round, d.removed, [(s.agent, s.value) for s in d.scores]) for d in state.decisions]

    mismatches = 0
    for seed in range(20):
        static = decisions("static", None, seed)
        truncated = decisions("temporal", 1, seed)
        if static != truncated:
            mismatches += 1
    elapsed = time.perf_counter() - started
    _check(8, "variant contract (static == truncated temporal, 20 seeds)", mismatches == 0,
           f"{mismatches} mismatching decision sequences", elapsed, 120.0)


def test_criterion_9_determinism_and_formats(tmp_path):
    started = time.perf_counter()

    def run(into):
        cfg = ExperimentConfig(
            attack="agent_targeted",
            n_tasks=4,
            trials=1,
            seed=99,
            lambda_=BENCH_LAMBDA,
            defense=True,
            carry_params=False,
        )
        return run_experiment(cfg, out_dir=into)

    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    _, logs = run(dir_a)
    run(dir_b)
    files_a = sorted(p.relative_to(dir_a) for p in dir_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(dir_b) for p in dir_b.rglob("*") if p.is_file())
    identical = files_a == files_b and all(
        (dir_a / rel).read_bytes() == (dir_b / rel).read_bytes() for rel in files_a
    )

    schema_ok = True
    for p in (dir_a / "episodes").glob("*.json"):
        try:
            validate_episode_json(json.loads(p.read_text()))
        except Exception:
            schema_ok = False

    from guardian.harness import export_episode_graph

    dot_ok = True
    for log in logs:
        dot = export_episode_graph(log, fmt="dot")
        graph_doc = json.loads(export_episode_graph(log, fmt="json"))
        dot_ok = dot_ok and dot.startswith("digraph guardian {") and dot.rstrip().endswith("}")
        dot_ok = dot_ok and dot.count("{") == dot.count("}")
        dot_ok = dot_ok and set(graph_doc) == {"nodes", "edges"}

    elapsed = time.perf_counter() - started
    _check(9, "determinism and formats", identical and schema_ok and dot_ok,
           f"byte-identical {identical}, schema {schema_ok}, dot {dot_ok}", elapsed, 60.0)
