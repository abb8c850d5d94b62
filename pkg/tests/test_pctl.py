from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amlas_rl.abstraction import Dtmc
from amlas_rl.pctl import (
    MISSION_PROPERTIES,
    MISSION_PROPERTIES_TRANSPOSED,
    TRUE,
    Atom,
    Eventually,
    Or,
    PctlFileError,
    PctlSemanticError,
    PctlSyntaxError,
    PctlUsageError,
    ProbQuery,
    RewardQuery,
    Until,
    check_prob,
    check_reward,
    evaluate,
    parse,
    parse_properties,
    render,
)
from amlas_rl.pctl.checker import satisfying
from dtmc_oracle import random_dag_dtmc, reward_oracle, until_oracle

FIXTURES = Path(__file__).parent / "fixtures"

# state tuples (m, e, do, du)
T0, T1, T2 = (0, 5, 2, 2), (0, 4, 2, 2), (0, 3, 2, 2)
U0, U1, U2 = (1, 5, 2, 2), (1, 4, 2, 2), (1, 3, 2, 2)
GOAL, TRAP = (3, 5, 2, 2), (2, 5, 2, 2)

CORPUS = [
    "P>=0.6 [ F m=3 ]",
    "P<=0.1 [ F m=2 ]",
    'R{"unsafe"}=? [ F m=2 | m=3 | e=0 ]',
    'R{"unsafe"}=? [ U m=2 ]',
    "P=? [ F m=3 ]",
    "P>=0 [ F true ]",
    "P<=1 [ false U m=1 ]",
    "P>=0.25 [ m=0 U m=3 ]",
    "P=? [ m!=2 & e>0 U m=3 ]",
    "P=? [ (m=0 | m=1) & e>=3 U m=3 & e<10 ]",
    "P<=0.5 [ F !(m=1 | m=0) ]",
    "P=? [ F !m=1 ]",
    "P=? [ F do<1 & du<=1 ]",
    "P>=1e-3 [ F e=0 ]",
    "P=? [ !(!(m=3)) U m=3 ]",
    "P=? [ F (m=3 | m=2) | e=0 ]",
    "P=? [ F m=3 & (e>5 | do=2) ]",
    'R{"unsafe"}<=20 [ F m=3 ]',
    'R{"unsafe"}>=0.5 [ true U m=2 | m=3 ]',
    "P>=.5 [ F du>0 ]",
]


# --- parser ------------------------------------------------------------------------


def test_parse_goal_property():
    assert parse("P>=0.6 [ F m=3 ]") == ProbQuery(">=", 0.6, Eventually(Atom("m", "=", 3)))


def test_whitespace_insensitive():
    assert parse("P >= 0.6[F m=3]") == parse("P>=0.6 [ F m=3 ]")
    assert parse("  P>=0.6\t[\nF   m = 3 ]  ") == parse("P>=0.6 [ F m=3 ]")


def test_missing_bound_is_positioned():
    with pytest.raises(PctlSyntaxError) as exc:
        parse("P>=[F m=3]")
    assert exc.value.position == 3
    assert "a number" in exc.value.expected


def test_reward_query_shapes():
    f = parse('R{"unsafe"}=? [ F m=2 | m=3 | e=0 ]')
    assert f == RewardQuery("unsafe", "=?", None, Eventually(Or((Atom("m", "=", 2), Atom("m", "=", 3), Atom("e", "=", 0)))))
    assert parse('R{"unsafe"}=? [ U m=2 ]').path == Until(TRUE, Atom("m", "=", 2))


@pytest.mark.parametrize("text", CORPUS)
def test_parse_render_parse_identity(text):
    f = parse(text)
    assert parse(render(f)) == f
    assert render(parse(render(f))) == render(f)


def test_corpus_size():
    assert len(CORPUS) == 20


MALFORMED = [
    ("P>=[F m=3]", 3),
    ("", 0),
    ("Q>=0.5 [ F m=3 ]", 0),
    ("P>=0.5 F m=3 ]", 7),
    ("P>=0.5 [ F m=3", 14),
    ("P>=0.5 [ F m=3 ] extra", 17),
    ("P>=0.5 [ F m= ]", 14),
    ("P>=0.5 [ F m 3 ]", 13),
    ("P>=0.5 [ F (m=3 ]", 16),
    ("P>=0.5 [ m=1 ]", 13),
    ("P>=0.5 [ F m=3 & ]", 17),
    ("P=0.5 [ F m=3 ]", 1),
    ('R{unsafe}=? [ F m=3 ]', 2),
    ('R{"unsafe"}=? [ F m=3 U m=2 ]', 22),
    ("P>=0.5 [ F m=3 # ]", 15),
    ("P>=0.5 [ F F m=3 ]", 11),
]


@pytest.mark.parametrize("text, position", MALFORMED)
def test_malformed_inputs_report_position(text, position):
    with pytest.raises(PctlSyntaxError) as exc:
        parse(text)
    assert exc.value.position == position
    assert exc.value.expected
    assert f"at position {position}" in str(exc.value)


@pytest.mark.parametrize(
    "text, position",
    [("P>=1.5 [ F m=3 ]", 3), ("P<=-0 [ F m=3 ]", 3), ('R{"u"}<=-1 [ F m=3 ]', 8), ("P=? [ F m=2.5 ]", 10)],
)
def test_semantic_errors(text, position):
    with pytest.raises((PctlSemanticError, PctlSyntaxError)) as exc:
        parse(text)
    assert exc.value.position == position


def test_bound_outside_unit_interval_is_semantic():
    with pytest.raises(PctlSemanticError):
        parse("P>=1.5 [ F m=3 ]")


def test_property_file_fixtures_match_shipped_text():
    assert (FIXTURES / "mission.pctl").read_text() == MISSION_PROPERTIES
    assert (FIXTURES / "mission_transposed.pctl").read_text() == MISSION_PROPERTIES_TRANSPOSED
    props = parse_properties(MISSION_PROPERTIES)
    assert [p.name for p in props] == ["C1", "C2", "R0"]
    literal = parse_properties(MISSION_PROPERTIES_TRANSPOSED)
    assert literal[0].formula.path.target == props[1].formula.path.target
    assert literal[1].formula.path.target == props[0].formula.path.target


def test_property_file_error_carries_line():
    with pytest.raises(PctlFileError) as exc:
        parse_properties("# header\nC1: P>=0.6 [ F m=3 ]\n\nC2: P<=0.1 [ F m= ]\n")
    assert exc.value.lineno == 4
    assert isinstance(exc.value.cause, PctlSyntaxError)


# --- closed forms ----------------------------------------------------------------------


def goal_or_trap():
    return Dtmc.from_edges([T0, GOAL, TRAP], [1, 0, 0], {(0, 1): 0.5, (0, 2): 0.5, (1, 1): 1.0, (2, 2): 1.0})


def test_single_branch_half():
    assert check_prob(goal_or_trap(), Eventually(Atom("m", "=", 3))).value == pytest.approx(0.5, abs=1e-12)


def test_certain_chain():
    d = Dtmc.from_edges([T0, T1, GOAL], [1, 0, 0], {(0, 1): 1.0, (1, 2): 1.0, (2, 2): 1.0})
    assert check_prob(d, Eventually(Atom("m", "=", 3))).value == 1.0


def test_geometric_series():
    d = Dtmc.from_edges([T0, GOAL, TRAP], [1, 0, 0], {(0, 1): 0.3, (0, 2): 0.2, (0, 0): 0.5, (1, 1): 1.0, (2, 2): 1.0})
    # 0.3 / (1 - 0.5)
    assert check_prob(d, Eventually(Atom("m", "=", 3))).value == pytest.approx(0.6, abs=1e-12)


def test_reward_linear_chain():
    d = Dtmc.from_edges([U0, U1, U2, GOAL], [1, 0, 0, 0], {(0, 1): 1.0, (1, 2): 1.0, (2, 3): 1.0, (3, 3): 1.0})
    assert check_reward(d, "unsafe", Atom("m", "=", 3)).value == pytest.approx(3.0, abs=1e-12)


def test_reward_all_zero():
    d = Dtmc.from_edges([T0, T1, GOAL], [1, 0, 0], {(0, 1): 1.0, (1, 2): 1.0, (2, 2): 1.0})
    assert check_reward(d, "unsafe", Atom("m", "=", 3)).value == 0.0


def test_reward_expected_visits():
    d = Dtmc.from_edges([U0, GOAL], [1, 0], {(0, 0): 0.5, (0, 1): 0.5, (1, 1): 1.0})
    # 1 / (1 - 0.5) visits
    assert check_reward(d, "unsafe", Atom("m", "=", 3)).value == pytest.approx(2.0, abs=1e-12)


def test_reward_infinite_when_target_may_be_missed():
    res = check_reward(goal_or_trap(), "unsafe", Atom("m", "=", 3))
    assert math.isinf(res.value)
    np.testing.assert_array_equal(res.infinite_states, [True, False, True])


def test_unknown_reward_label():
    with pytest.raises(PctlUsageError):
        check_reward(goal_or_trap(), "energy", Atom("m", "=", 3))


def test_unknown_field():
    with pytest.raises(PctlSemanticError, match="unknown state field 'speed'"):
        evaluate(goal_or_trap(), parse("P=? [ F speed=1 ]"))


def test_reward_with_constraint_rejected():
    with pytest.raises(PctlSemanticError):
        evaluate(goal_or_trap(), parse('R{"unsafe"}=? [ m=0 U m=3 ]'))


# --- verdicts ------------------------------------------------------------------------


def chain_with_goal_probability(p_goal, p_coll):
    rest = 1.0 - p_goal - p_coll
    return Dtmc.from_edges(
        [T0, GOAL, TRAP, (0, 0, 2, 2)], [1, 0, 0, 0], {(0, 1): p_goal, (0, 2): p_coll, (0, 3): rest, (1, 1): 1.0, (2, 2): 1.0, (3, 3): 1.0}
    )


def test_mission_properties_verdicts():
    d = chain_with_goal_probability(0.604, 0.058)
    results = {p.name: evaluate(d, p.formula) for p in parse_properties(MISSION_PROPERTIES)}
    assert results["C1"].value == pytest.approx(0.604, abs=1e-12) and results["C1"].verdict is True
    assert results["C2"].value == pytest.approx(0.058, abs=1e-12) and results["C2"].verdict is True
    assert results["R0"].verdict is None
    assert evaluate(chain_with_goal_probability(0.59, 0.058), parse("P>=0.6 [ F m=3 ]")).verdict is False


@given(st.floats(0, 1), st.floats(0, 1))
def test_verdict_agrees_with_value(p, bound):
    d = chain_with_goal_probability(p, 0.0)
    ge = evaluate(d, ProbQuery(">=", bound, Eventually(Atom("m", "=", 3))))
    le = evaluate(d, ProbQuery("<=", bound, Eventually(Atom("m", "=", 3))))
    assert 0.0 <= ge.value <= 1.0
    assert ge.verdict == (ge.value >= bound)
    assert le.verdict == (le.value <= bound)


# --- oracle equivalence -----------------------------------------------------------------

TARGETS = ["m=3", "m=2", "m=3 | du=0", "e<=4", "m=2 | m=3 | e=0", "do=1 & m!=1"]
CONSTRAINTS = ["true", "m=0", "e>=3", "du!=2 | m=1"]


def test_random_dtmcs_match_path_enumeration():
    rng = np.random.default_rng(2024)
    checked = 0
    for k in range(120):
        dtmc, exact, initial, _ = random_dag_dtmc(rng)
        text = f"P=? [ {CONSTRAINTS[k % 4]} U {TARGETS[k % 6]} ]"
        path = parse(text).path
        expected = until_oracle(exact, initial, satisfying(dtmc, path.constraint), satisfying(dtmc, path.target))
        for method in ("direct", "iterative"):
            assert check_prob(dtmc, path, method).value == pytest.approx(float(expected), abs=1e-9), (k, text, method)
        checked += 1
    assert checked >= 50


def test_random_dtmc_rewards_match_path_enumeration():
    rng = np.random.default_rng(7)
    finite = 0
    for k in range(80):
        dtmc, exact, initial, reward = random_dag_dtmc(rng)
        target = parse(f"P=? [ F {TARGETS[k % 6]} ]").path.target
        expected = reward_oracle(exact, initial, reward, satisfying(dtmc, target))
        got = check_reward(dtmc, "r", target).value
        if expected is None:
            assert math.isinf(got)
        else:
            finite += 1
            assert got == pytest.approx(float(expected), abs=1e-9)
    assert finite >= 10


def test_eventually_equals_true_until():
    rng = np.random.default_rng(5)
    for _ in range(30):
        dtmc, *_ = random_dag_dtmc(rng)
        for t in TARGETS:
            target = parse(f"P=? [ F {t} ]").path.target
            assert check_prob(dtmc, Eventually(target)).value == check_prob(dtmc, Until(TRUE, target)).value


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5.0))
def test_extra_mass_into_target_never_lowers_probability(seed, delta):
    rng = np.random.default_rng(seed)
    dtmc, exact, initial, _ = random_dag_dtmc(rng, n_states=4)
    target = satisfying(dtmc, Atom("m", "=", 3))
    if not target.any():
        return
    t = int(np.flatnonzero(target)[0])
    transient = [i for i in range(4) if exact[i] != {i: 1} and i < t]
    if not transient:
        return
    i = transient[0]
    p = dtmc.transitions.toarray()
    p[i, t] += delta
    p[i] /= p[i].sum()
    bumped = Dtmc.from_edges(dtmc.states, dtmc.initial, {(a, b): p[a, b] for a, b in zip(*np.nonzero(p))})
    before = check_prob(dtmc, Eventually(Atom("m", "=", 3))).value
    after = check_prob(bumped, Eventually(Atom("m", "=", 3))).value
    assert after >= before - 1e-12
    assert 0.0 <= after <= 1.0


# --- solver paths --------------------------------------------------------------------


def energy_ladder(n_per_bin=3, bins=10, rng=None):
    """Random chain over (m in {0,1}) x energy bins that only ever loses energy."""
    rng = rng or np.random.default_rng(0)
    states = [(m, e, do, 2) for e in range(1, bins + 1) for m in (0, 1) for do in range(n_per_bin)]
    states += [GOAL[:1] + (e, 2, 2) for e in range(1, bins + 1)] + [(0, 0, 2, 2), TRAP]
    index = {s: i for i, s in enumerate(states)}
    edges = {}
    for s in states:
        i = index[s]
        if s[0] in (2, 3) or s[1] == 0:
            edges[(i, i)] = 1.0
            continue
        same = [index[(m, s[1], do, 2)] for m in (0, 1) for do in range(n_per_bin)]
        lower = [index[(m, s[1] - 1, do, 2)] for m in (0, 1) for do in range(n_per_bin)] if s[1] > 1 else [index[(0, 0, 2, 2)]]
        succ = sorted(set(rng.choice(same, 2).tolist() + rng.choice(lower, 2).tolist() + [index[(3, s[1], 2, 2)], index[TRAP]]))
        w = rng.uniform(0.1, 1.0, len(succ))
        for j, p in zip(succ, w / w.sum()):
            edges[(i, j)] = float(p)
    initial = np.zeros(len(states))
    initial[index[(0, bins, 0, 2)]] = 1.0
    return Dtmc.from_edges(states, initial, edges)


def test_energy_layered_sweeps_within_bound():
    d = energy_ladder()
    d.validate()
    bound = 10 * 2 + 1
    for text in ("P=? [ F m=3 ]", "P=? [ F m=2 ]", 'R{"unsafe"}=? [ F m=2 | m=3 | e=0 ]'):
        it = evaluate(d, parse(text), method="iterative")
        direct = evaluate(d, parse(text), method="direct")
        assert it.method == "value-iteration (energy-layered)"
        assert it.sweeps <= bound
        assert direct.method == "gaussian-elimination"
        assert it.value == pytest.approx(direct.value, abs=1e-9)


def test_non_monotone_chain_falls_back_to_plain_iteration():
    # energy goes back up from state 0 to state 1: no layering possible
    d = Dtmc.from_edges(
        [(1, 3, 2, 2), (0, 4, 2, 2), GOAL, TRAP],
        [1, 0, 0, 0],
        {(0, 1): 0.5, (0, 2): 0.3, (0, 3): 0.2, (1, 0): 0.5, (1, 2): 0.5, (2, 2): 1.0, (3, 3): 1.0},
    )
    r = check_prob(d, Eventually(Atom("m", "=", 3)), method="iterative")
    assert r.method == "value-iteration"
    # x0 = 0.5 x1 + 0.3, x1 = 0.5 x0 + 0.5
    assert r.value == pytest.approx(0.55 / 0.75, abs=1e-9)
    res = check_reward(d, "unsafe", Atom("m", ">=", 2), method="iterative")
    # expected visits to state 0: 1 / (1 - 0.25)
    assert res.value == pytest.approx(1 / 0.75, abs=1e-9)


def test_all_states_decided_by_graph_analysis():
    r = check_prob(goal_or_trap(), Eventually(Atom("m", "=", 3)), method="iterative")
    assert r.method in ("trivial", "gaussian-elimination", "value-iteration (energy-layered)")
    np.testing.assert_allclose(r.per_state, [0.5, 1.0, 0.0])


def test_unknown_method():
    with pytest.raises(ValueError):
        check_prob(goal_or_trap(), Eventually(Atom("m", "=", 3)), method="magic")
