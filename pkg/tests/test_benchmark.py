import dataclasses
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusion_pilot import benchmark as bm
from fusion_pilot.model import Action
from fusion_pilot.sim.dynamics import INFRACTION_KINDS, InfractionEvent
from fusion_pilot.sim.episode import ConstantPolicy, EpisodeResult
from fusion_pilot.sim.expert import ExpertPolicy
from fusion_pilot.sim.world import TASKS, make_suite

BRAKE = ConstantPolicy(Action(0.0, 0.0, 1.0))


def _result(km, kinds=(), route_km=1.0):
    ev = [InfractionEvent(k, float(i), (0.0, 0.0)) for i, k in enumerate(kinds)]
    return EpisodeResult("navigation", 1, "clear-noon", 0, 0, True, "goal", 10.0, km, route_km, 0, ev)


def test_success_rate_examples():
    assert bm.success_rate(84, 100) == 84.0
    assert bm.success_rate(0, 50) == 0.0
    assert bm.success_rate(50, 50) == 100.0
    with pytest.raises(ValueError):
        bm.success_rate(0, 0)
    with pytest.raises(ValueError):
        bm.success_rate(51, 50)


@given(st.integers(1, 500), st.integers(0, 500), st.integers(1, 20))
def test_success_rate_scale_exact(e_t, e_s, k):
    e_s = min(e_s, e_t)
    assert bm.success_rate(k * e_s, k * e_t) == bm.success_rate(e_s, e_t)


def test_compute_vp_examples():
    assert bm.compute_vp(0, 0, 0) == 0
    assert bm.compute_vp(100, 100, 100) == 100
    assert bm.compute_vp(80, 60, 40) == pytest.approx(55.0)
    assert bm.compute_vp(48, 48, 48) == pytest.approx(48.0)
    with pytest.raises(ValueError):
        bm.compute_vp(101, 0, 0)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100))
def test_compute_vp_bounded_by_inputs(a, b, c):
    v = bm.compute_vp(a, b, c)
    assert min(a, b, c) - 1e-9 <= v <= max(a, b, c) + 1e-9


def test_sample_std_uses_n_minus_one():
    assert bm.sample_std([94.0, 94.0, 94.0]) == 0.0
    assert bm.sample_std([1.0, 2.0, 3.0]) == pytest.approx(1.0)
    assert bm.sample_std([7.0]) == 0.0


def test_canonical_blocks_e_t():
    blocks = bm.canonical_blocks()
    assert [b.e_t for b in blocks] == [100, 100, 50, 50]
    assert [b.name for b in blocks] == list(bm.BLOCK_NAMES)
    assert [b.town for b in blocks] == [1, 2, 1, 2]


def test_split_seed_distinct_and_stable():
    seeds = [bm.split_seed(0, r) for r in range(3)]
    assert len(set(seeds)) == 3
    assert seeds == [bm.split_seed(0, r) for r in range(3)]
    assert bm.split_seed(1, 0) != seeds[0]


# ---------------------------------------------------------------- infractions


def test_infraction_metrics_examples():
    m = bm.infraction_metrics([_result(4.0, ["sidewalk"]), _result(6.0, ["sidewalk"])])
    assert m["driven_km"] == 10.0
    assert m["kinds"]["sidewalk"]["km_per"] == 5.0 and not m["kinds"]["sidewalk"]["open_bound"]
    assert bm.format_km_per(m["kinds"]["opposite-lane"]) == "> 10.00"
    empty = bm.infraction_metrics([])
    assert empty["driven_km"] == 0.0
    assert all(bm.format_km_per(v) == "> 0.00" for v in empty["kinds"].values())


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 5), st.lists(st.sampled_from(INFRACTION_KINDS), max_size=6)),
                max_size=12))
def test_infraction_metrics_matches_recount(episodes):
    results = [_result(km, kinds) for km, kinds in episodes]
    m = bm.infraction_metrics(results)
    total = sum(km for km, _ in episodes)
    assert m["driven_km"] == pytest.approx(total)
    assert m["perfect_km"] == pytest.approx(len(episodes) * 1.0)
    for k in INFRACTION_KINDS:
        n = sum(kinds.count(k) for _, kinds in episodes)
        entry = m["kinds"][k]
        assert entry["count"] == n
        assert entry["open_bound"] == (n == 0)
        assert entry["km_per"] == pytest.approx(total / n if n else total)


# ---------------------------------------------------------------- running blocks


@pytest.fixture(scope="module")
def small_block():
    return bm.ConditionBlock("new-weather", 1, ("wet-cloudy-noon", "soft-rainy-sunset"), 25)


def test_run_block_47_of_50(small_block):
    suite = small_block.suite("straight")
    # three episodes get an impossible budget so the expert times out on exactly those
    for i in (3, 20, 41):
        suite[i] = dataclasses.replace(suite[i], time_budget=0.5)
    rep = bm.run_block(ExpertPolicy(), small_block, "straight", repeats=3, suite=suite)
    assert rep.e_t == 50
    assert rep.successes == [47, 47, 47]
    assert (rep.mean, rep.std) == (94.0, 0.0)


def test_run_block_reproducible_and_seeds_split(small_block):
    a = bm.run_block(ExpertPolicy(), small_block, "straight", repeats=2, root_seed=7)
    b = bm.run_block(ExpertPolicy(), small_block, "straight", repeats=2, root_seed=7)
    assert a.to_dict() == b.to_dict()
    assert (a.mean, a.std) == (100.0, 0.0)
    assert a.seeds == [bm.split_seed(7, 0), bm.split_seed(7, 1)]


def test_run_block_rejects_bad_suite(small_block):
    with pytest.raises(bm.ReportError, match="expects 50"):
        bm.run_block(BRAKE, small_block, "straight", suite=small_block.suite("straight")[:10])
    with pytest.raises(bm.ReportError):
        bm.run_block(BRAKE, small_block, "straight", suite=[])
    with pytest.raises(ValueError):
        bm.run_block(BRAKE, small_block, "flying")


def test_validation_score_examples():
    small = bm.validation_suites(n=2)
    assert bm.validation_score(ExpertPolicy(), small, required_size=2) == (100.0, 100.0, 100.0, 100.0)
    assert bm.validation_score(BRAKE, small, required_size=2) == (0.0, 0.0, 0.0, 0.0)
    with pytest.raises(bm.ReportError, match="expected 25"):
        bm.validation_score(BRAKE, small)


def test_validation_suite_conditions():
    vw, vt, vwt = bm.validation_suites(n=3)
    assert {(e.town, e.weather) for e in vw} == {(1, "soft-rainy-sunset")}
    assert {(e.town, e.weather) for e in vt} == {(2, "clear-noon")}
    assert {(e.town, e.weather) for e in vwt} == {(2, "soft-rainy-sunset")}


# ---------------------------------------------------------------- reports


def _fake_report(label, base=90):
    blocks = {}
    for bi, b in enumerate(bm.canonical_blocks()):
        blocks[b.name] = {}
        for ti, t in enumerate(TASKS):
            e_s = min(b.e_t, base - 5 * ti - bi)
            res = [_result(0.5, ["sidewalk"] if t == "navigation-dynamic" else [])]
            blocks[b.name][t] = bm.TaskReport(t, b.name, b.e_t, [e_s, e_s, e_s - 1], [1, 2, 3],
                                              bm.infraction_metrics(res))
    return bm.BenchmarkReport({"label": label, "fusion": label}, blocks, 3, 0)


def test_emit_and_parse_round_trip(tmp_path):
    rep = _fake_report("early")
    paths = bm.emit_report(rep, tmp_path)
    back = bm.parse_report(paths["json"])
    assert back.to_dict() == rep.to_dict()
    txt = (tmp_path / "report.txt").read_text()
    assert "Km per infraction" in txt and "early" in txt


def test_comparison_table_shape_and_std_format():
    reps = [_fake_report("rgb", 80), _fake_report("early", 90)]
    rows = bm.comparison_rows(reps)
    assert len(rows) == len(TASKS) * 4
    assert list(rows[0]) == ["task", "block", "E_T", "rgb", "early"]
    csv_lines = bm.comparison_csv(reps).splitlines()
    assert len(csv_lines) == 1 + 16
    exact = _fake_report("x")
    for b in exact.blocks.values():
        for tr in b.values():
            tr.successes = [tr.successes[0]] * 3
    assert all(r["x"].endswith("± 0.00") for r in bm.comparison_rows([exact]))


def test_incomplete_report_rejected(tmp_path):
    rep = _fake_report("early")
    del rep.blocks["new-town"]["straight"]
    with pytest.raises(bm.ReportError, match="straight"):
        bm.emit_report(rep, tmp_path)


def test_parse_report_names_file(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text(json.dumps({"version": 1, "blocks": {}}))
    with pytest.raises(bm.ReportError, match="broken.json"):
        bm.parse_report(bad)


def test_task_suites_dynamic_flag():
    for t in TASKS:
        ep = make_suite(1, t, ["clear-noon"], 1, 0)[0]
        assert ep.world(0).dynamic == (t == "navigation-dynamic")
