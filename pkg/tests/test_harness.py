from __future__ import annotations

import json
import re

import pytest

from guardian.harness import (
    ExperimentConfig,
    HarnessError,
    compute_metrics,
    episode_from_json,
    episode_to_json,
    export_episode_graph,
    export_graph,
    load_corpus,
    make_corpus,
    metrics_csv,
    parse_config_file,
    run_experiment,
    save_corpus,
    validate_episode_json,
)
from guardian.graph import TemporalGraph
from guardian.simulator import EpisodeLog, GroundTruth, RoundRecord, Task

TASK = Task(id="m0", question="q", answer_space=("8", "57"), correct="8")


def _log(removals, hits, total_rounds=3, final="8", api=12, n_agents=4):
    """Synthetic episode: `removals` maps round -> agent, `hits` says whether
    that agent was truly anomalous at that round."""
    rounds = []
    h = []
    err = []
    for t in range(1, total_rounds + 1):
        agents = list(range(n_agents))
        removed = removals.get(t)
        rounds.append(
            RoundRecord(
                t=t,
                agents=agents,
                responses=[f"Answer: 8. Reasoning: solver {t}"] * n_agents,
                answers=["8"] * n_agents,
                edges=[] if t == 1 else [(0, 1)],
                removed=removed,
                scores=[0.1] * n_agents,
            )
        )
        h.append([False] * n_agents)
        err_row = [False] * n_agents
        if removed is not None and hits.get(t, False):
            err_row[agents.index(removed)] = True
        err.append(err_row)
    return EpisodeLog(
        task=TASK,
        rounds=rounds,
        ground_truth=GroundTruth(h=h, err=err, corrupted_edges=[]),
        final_answer=final,
        api_calls=api,
    )


def test_metrics_all_removals_correct():
    logs = [_log({1: 2}, {1: True}), _log({2: 1}, {2: True})]
    report = compute_metrics(logs)
    assert report.fdr == 0.0
    assert report.detection_rate == 1.0


def test_metrics_weighted_hand_example():
    # removals at rounds 1 and 2, hits (1, 0), exponential lambda 0.5:
    # (1*1 + 0.5*0) / 1.5 = 2/3
    log = _log({1: 2, 2: 3}, {1: True, 2: False})
    report = compute_metrics([log])
    assert abs(report.detection_rate - 2.0 / 3.0) < 1e-12
    assert report.fdr == 0.5


def test_metrics_fdr_quarter():
    logs = [
        _log({1: 0}, {1: True}),
        _log({1: 1}, {1: True}),
        _log({1: 2}, {1: True}),
        _log({1: 3}, {1: False}),
    ]
    assert compute_metrics(logs).fdr == 0.25


def test_metrics_linear_decay():
    # 3-round episode, removals at rounds 1 and 3, hits (0, 1):
    # weights 3/3 and 1/3 -> rate = (1/3) / (4/3) = 0.25
    log = _log({1: 0, 3: 1}, {1: False, 3: True})
    report = compute_metrics([log], decay="linear")
    assert abs(report.detection_rate - 0.25) < 1e-12


def test_metrics_no_removals():
    report = compute_metrics([_log({}, {})])
    assert report.fdr == 0.0
    assert report.detection_rate is None


def test_metrics_accuracy_and_api_mean():
    logs = [_log({}, {}, final="8", api=10), _log({}, {}, final="57", api=14)]
    report = compute_metrics(logs)
    assert report.accuracy == 0.5
    assert report.api_calls_mean == 12.0


def test_metrics_without_ground_truth_marks_unavailable():
    log = _log({1: 0}, {1: True})
    log.ground_truth = None
    report = compute_metrics([log])
    assert report.detection_rate is None
    assert report.fdr is None


def test_metrics_permutation_invariant():
    logs = [
        _log({1: 0}, {1: True}),
        _log({2: 1}, {2: False}),
        _log({3: 2}, {3: True}),
    ]
    a = compute_metrics(logs)
    b = compute_metrics(list(reversed(logs)))
    assert a == b


def test_metrics_fdr_zero_iff_all_hits():
    rng_cases = [
        [_log({1: 0}, {1: True}), _log({2: 3}, {2: True})],
        [_log({1: 0}, {1: True}), _log({2: 3}, {2: False})],
    ]
    for logs in rng_cases:
        report = compute_metrics(logs)
        all_hits = report.detection_rate == 1.0 if report.detection_rate is not None else True
        assert (report.fdr == 0.0) == all_hits


def test_metrics_pooling_flag():
    # Episode A: one removal, hit (rate 1). Episode B: removals at rounds
    # 1 and 2, hits (0, 0) (rate 0). Pooled: 1/2.5; per-episode: 0.5.
    log_a = _log({1: 0}, {1: True})
    log_b = _log({1: 1, 2: 2}, {1: False, 2: False})
    pooled = compute_metrics([log_a, log_b], pooling="pooled")
    per_ep = compute_metrics([log_a, log_b], pooling="per_episode")
    assert abs(pooled.detection_rate - 1.0 / 2.5) < 1e-12
    assert abs(per_ep.detection_rate - 0.5) < 1e-12


def test_metrics_requires_logs():
    with pytest.raises(HarnessError):
        compute_metrics([])


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def test_make_corpus_deterministic():
    a = make_corpus(10, seed=3)
    b = make_corpus(10, seed=3)
    assert a == b
    assert all(t.correct in t.answer_space for t in a)


def test_corpus_tsv_roundtrip(tmp_path):
    tasks = make_corpus(5, seed=1)
    path = tmp_path / "corpus.tsv"
    save_corpus(tasks, path)
    assert load_corpus(path) == tasks


def test_corpus_load_reports_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("t0\tq\t8|9\t0\nt1\tq only two fields\n")
    with pytest.raises(HarnessError, match=r"bad\.tsv:2"):
        load_corpus(path)


def test_corpus_bad_index_reported(tmp_path):
    path = tmp_path / "bad2.tsv"
    path.write_text("t0\tq\t8|9\t7\n")
    with pytest.raises(HarnessError, match="index"):
        load_corpus(path)


def test_corpus_missing_file():
    with pytest.raises(HarnessError, match="cannot read"):
        load_corpus("/nonexistent/corpus.tsv")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_file_parse_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# experiment\nn_agents = 5\ntopology = 0.5\nattack = agent\nlambda = 0.02\n"
        "carry_params = false\n"
    )
    cfg = ExperimentConfig.from_sources(parse_config_file(path), seed=9, n_agents=6)
    assert cfg.n_agents == 6  # CLI override wins
    assert cfg.topology == 0.5
    assert cfg.attack == "agent_targeted"
    assert cfg.lambda_ == 0.02
    assert cfg.carry_params is False
    assert cfg.seed == 9


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("frobnicate = 3\n")
    with pytest.raises(HarnessError, match="frobnicate"):
        ExperimentConfig.from_sources(parse_config_file(path))


def test_config_validates_topology_and_trials():
    with pytest.raises(HarnessError):
        ExperimentConfig(topology=0.6)
    with pytest.raises(HarnessError):
        ExperimentConfig(trials=0)


def test_config_hash_stable_and_sensitive():
    a = ExperimentConfig(seed=1)
    b = ExperimentConfig(seed=1)
    c = ExperimentConfig(seed=2)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


# ---------------------------------------------------------------------------
# episode JSON
# ---------------------------------------------------------------------------


def _fast_cfg(**kw):
    defaults = dict(
        n_tasks=3,
        trials=1,
        seed=5,
        epochs_initial=5,
        epochs_incremental=2,
        defense=True,
        attack="hallucination",
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_episode_json_roundtrip_and_schema(tmp_path):
    report, logs = run_experiment(_fast_cfg(), out_dir=tmp_path)
    files = sorted((tmp_path / "episodes").glob("*.json"))
    assert len(files) == 3
    for f in files:
        doc = json.loads(f.read_text())
        validate_episode_json(doc)
        log = episode_from_json(f.read_text())
        assert episode_to_json(log) == f.read_text()


def test_validate_rejects_malformed_docs():
    log = _log({1: 0}, {1: True})
    doc = json.loads(episode_to_json(log))
    validate_episode_json(doc)

    bad = json.loads(episode_to_json(log))
    del bad["api_calls"]
    with pytest.raises(HarnessError):
        validate_episode_json(bad)

    bad = json.loads(episode_to_json(log))
    bad["rounds"][0]["scores"] = [1.0]  # wrong arity
    with pytest.raises(HarnessError):
        validate_episode_json(bad)

    bad = json.loads(episode_to_json(log))
    bad["ground_truth"]["h"] = bad["ground_truth"]["h"][:-1]
    with pytest.raises(HarnessError):
        validate_episode_json(bad)


def test_run_experiment_clean_accuracy_one(tmp_path):
    cfg = _fast_cfg(attack="none", defense=False)
    report, logs = run_experiment(cfg)
    assert report.accuracy == 1.0
    assert all(len(log.rounds) == 1 for log in logs)
    assert report.api_calls_mean == 4.0


def test_run_experiment_byte_identical(tmp_path):
    cfg_args = dict(attack="agent", seed=11)
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    run_experiment(_fast_cfg(**cfg_args), out_dir=dir_a)
    run_experiment(_fast_cfg(**cfg_args), out_dir=dir_b)
    files_a = sorted(p.relative_to(dir_a) for p in dir_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(dir_b) for p in dir_b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (dir_a / rel).read_bytes() == (dir_b / rel).read_bytes(), rel


def test_metrics_csv_format():
    cfg = _fast_cfg()
    report, _ = run_experiment(cfg)
    csv = metrics_csv(cfg, report)
    lines = csv.strip().split("\n")
    assert lines[0] == "config_hash,trials,accuracy,detection_rate,fdr,api_calls_mean,runtime_seconds"
    cells = lines[1].split(",")
    assert cells[0] == cfg.config_hash()
    assert cells[1] == "1"
    assert cells[6] == "0.000000"  # timing off -> deterministic zero


def test_trials_multiply_episodes():
    report, logs = run_experiment(_fast_cfg(trials=2, attack="none", defense=False))
    assert len(logs) == 6


# ---------------------------------------------------------------------------
# graph export
# ---------------------------------------------------------------------------

_DOT_EDGE = re.compile(r'^\s*"r\d+_a\d+" -> "r\d+_a\d+"( \[[^\]]*\])?;$')
_DOT_NODE = re.compile(r'^\s*"r\d+_a\d+" \[[^\]]*\];$')


def _assert_dot_wellformed(text: str) -> None:
    lines = text.strip().split("\n")
    assert lines[0] == "digraph guardian {"
    assert lines[-1] == "}"
    depth = 0
    for line in lines:
        depth += line.count("{") - line.count("}")
        assert depth >= 0
        stripped = line.strip()
        if "->" in stripped:
            assert _DOT_EDGE.match(line), line
        elif stripped.startswith('"'):
            assert _DOT_NODE.match(line), line
    assert depth == 0


def test_export_empty_graph():
    doc = json.loads(export_graph(TemporalGraph(), fmt="json"))
    assert doc == {"nodes": [], "edges": []}
    _assert_dot_wellformed(export_graph(TemporalGraph(), fmt="dot"))


def test_export_two_rounds_two_agents_counts():
    # 2 rounds x 2 agents, full topology: 4 node records; 2 communication
    # edges plus 2 per-agent continuity edges = 4 edge records.
    from guardian.embedder import EmbeddingConfig, make_embedder
    from guardian.graph import build_snapshot

    embed = make_embedder(EmbeddingConfig(dim=16))
    g = TemporalGraph()
    g.append_snapshot(build_snapshot(1, [(0, "a"), (1, "b")], None, embed))
    g.append_snapshot(
        build_snapshot(2, [(0, "c"), (1, "d")], {0: (1,), 1: (0,)}, embed)
    )
    doc = json.loads(export_graph(g, scores={(2, 0): 0.25}, fmt="json"))
    assert len(doc["nodes"]) == 4
    assert len(doc["edges"]) == 4
    kinds = sorted(e["kind"] for e in doc["edges"])
    assert kinds == ["comm", "comm", "continuity", "continuity"]
    scored = [n for n in doc["nodes"] if n["score"] is not None]
    assert scored == [{"round": 2, "agent": 0, "score": 0.25, "removed": False}]
    _assert_dot_wellformed(export_graph(g, fmt="dot"))


def test_export_episode_graph_marks_corruption_and_removal(tmp_path):
    cfg = _fast_cfg(attack="comm", min_rounds=3, n_tasks=2)
    _, logs = run_experiment(cfg)
    log = logs[0]
    doc = json.loads(export_episode_graph(log, fmt="json"))
    corrupted = [e for e in doc["edges"] if e["corrupted"]]
    assert corrupted, "communication attack must mark corrupted edges"
    assert all(e["kind"] == "comm" for e in corrupted)
    removed_nodes = [n for n in doc["nodes"] if n["removed"]]
    removed_rounds = [rec.t for rec in log.rounds if rec.removed is not None]
    assert len(removed_nodes) == len(removed_rounds)
    _assert_dot_wellformed(export_episode_graph(log, fmt="dot"))


def test_export_rejects_unknown_format():
    with pytest.raises(HarnessError):
        export_graph(TemporalGraph(), fmt="svg")
