import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from convsynth.evaluate import (
    EmptyPromptSet,
    EmptySampleSet,
    EvalReport,
    InvalidCounts,
    SuccessTable,
    dgr,
    dgr_of_designs,
    evaluate_policy,
    expected_scores,
    success,
    success_rate,
    write_report_csv,
)
from convsynth.generate import Prompt
from convsynth.netlist import parse_triple_list
from convsynth.policy import TrainConfig, sft_train, tokenize
from convsynth.reward import oracle_backend
from convsynth.sim import Design, SimResult, simulate

BUCK = "[['FET-B-0','IN','1'],['FET-A-0','1','0'],['inductor-0','1','OUT'],['capacitor-0','OUT','0']]"
BUCK_RELABELED = "[['FET-B-0','IN','7'],['FET-A-0','7','0'],['inductor-0','7','OUT'],['capacitor-0','OUT','0']]"
NO_OUTPUT = "[['FET-A-0','IN','0'],['capacitor-0','IN','0'],['inductor-0','IN','1'],['FET-B-0','1','0']]"

BUCK_POOL = (1, 1, 1, 1)


def buck(duty=0.5):
    return Design(parse_triple_list(BUCK), duty)


@pytest.fixture(scope="module")
def buck_policy():
    """Memorizes a single buck sequence, so sampling is all but deterministic."""
    prompt = Prompt("CE", BUCK_POOL, eff_floor=0.6)
    pair = (prompt, tokenize(parse_triple_list(BUCK), 0.5))
    cfg = TrainConfig(sft_epochs=200, sft_lr=5e-3, batch=4)
    return sft_train([pair] * 4, cfg, rng_seed=0)


class TestDgr:
    def test_no_duplicates(self):
        assert dgr(500, 500) == 1.0

    def test_reported_ratio(self):
        assert dgr(645, 500) == pytest.approx(1.29)

    def test_double(self):
        assert dgr(1000, 500) == 2.0

    @pytest.mark.parametrize("generated,unique", [(5, 0), (4, 5), (0, 0)])
    def test_invalid_counts(self, generated, unique):
        with pytest.raises(InvalidCounts):
            dgr(generated, unique)

    def test_of_designs_counts_canonical_keys(self):
        designs = [buck(0.5), Design(parse_triple_list(BUCK_RELABELED), 0.5), buck(0.7)]
        # relabelings and duty changes both collapse onto one topology
        assert dgr_of_designs(designs) == pytest.approx(3.0)

    def test_of_designs_distinct_topologies(self):
        boost = parse_triple_list(
            "[['inductor-0','IN','1'],['FET-A-0','1','0'],['FET-B-0','1','OUT'],['capacitor-0','OUT','0']]"
        )
        assert dgr_of_designs([buck(0.5), Design(boost, 0.5)]) == 1.0

    def test_of_designs_empty(self):
        with pytest.raises(EmptySampleSet):
            dgr_of_designs([])


class TestExpectedScores:
    def test_all_valid(self):
        e_valid, e_eff = expected_scores([buck(d) for d in (0.3, 0.5, 0.7)], oracle_backend())
        assert e_valid == 1.0
        assert 0.9 < e_eff <= 1.0

    def test_half_valid(self):
        samples = [buck(0.5), Design(parse_triple_list(NO_OUTPUT), 0.5)]
        e_valid, e_eff = expected_scores(samples, oracle_backend())
        assert e_valid == 0.5
        # the invalid half contributes zero efficiency
        assert e_eff == pytest.approx(0.5 * simulate(buck(0.5)).efficiency, abs=1e-9)

    def test_empty(self):
        with pytest.raises(EmptySampleSet):
            expected_scores([], oracle_backend())


class TestSuccess:
    def test_ce_buck(self):
        d = buck(0.5)
        x = Prompt("CE", BUCK_POOL, eff_floor=0.6)
        assert success(x, d, simulate(d))

    def test_pool_mismatch(self):
        d = buck(0.5)
        x = Prompt("C", (2, 0, 1, 1))
        assert not success(x, d, simulate(d))

    def test_cv_bound_violated(self):
        d = buck(0.9)  # vout near 1.8 V
        sim = simulate(d)
        assert sim.vout > 1.5
        x = Prompt("CV", BUCK_POOL, vout_relation="<", vout_bound=1.5, vin=2.0)
        assert not success(x, d, sim)

    def test_cv_bound_met(self):
        d = buck(0.9)
        x = Prompt("CV", BUCK_POOL, vout_relation=">", vout_bound=1.5, vin=2.0)
        assert success(x, d, simulate(d))

    def test_invalid_sim(self):
        d = Design(parse_triple_list(NO_OUTPUT), 0.5)
        assert not success(Prompt("C", BUCK_POOL), d, simulate(d))

    def test_c_requires_only_pool_and_validity(self):
        d = buck(0.1)
        assert success(Prompt("C", BUCK_POOL), d, simulate(d))


class TestSuccessRate:
    def test_memorized_buck_scores_100(self, buck_policy):
        prompts = [Prompt("CE", BUCK_POOL, eff_floor=0.6)] * 10
        table = success_rate(buck_policy, prompts, m=1, rng_seed=0)
        assert table.at(1) == 100.0
        assert table.sigma()["O"] == 100.0
        assert table.sigma()["CE"] == 100.0

    def test_monotone_in_m(self, buck_policy):
        prompts = [
            Prompt("CE", BUCK_POOL, eff_floor=0.6),
            Prompt("CV", BUCK_POOL, vout_relation="<", vout_bound=1.25, vin=2.0),
            Prompt("C", BUCK_POOL),
        ] * 3
        table = success_rate(buck_policy, prompts, m=5, rng_seed=1)
        assert table.at(1) <= table.at(3) <= table.at(5)

    def test_empty_prompts(self, buck_policy):
        with pytest.raises(EmptyPromptSet):
            success_rate(buck_policy, [], m=1)

    def test_k_beyond_m(self, buck_policy):
        table = success_rate(buck_policy, [Prompt("C", BUCK_POOL)], m=1, rng_seed=0)
        with pytest.raises(ValueError):
            table.at(2)


class TestSuccessTable:
    def mk(self, wins, cats=None):
        cats = cats or ["C"] * len(wins)
        prompts = [Prompt(c, BUCK_POOL, **(
            {"eff_floor": 0.5} if c == "CE" else
            {"vout_relation": "<", "vout_bound": 1.0, "vin": 2.0} if c == "CV" else {}
        )) for c in cats]
        return SuccessTable(prompts, wins, [])

    def test_sigma_mixes_categories(self):
        table = self.mk(
            [[True], [False], [True], [True]], cats=["C", "C", "CE", "CV"]
        )
        sigma = table.sigma()
        assert sigma["C"] == 50.0
        assert sigma["CE"] == 100.0
        assert sigma["CV"] == 100.0
        assert sigma["O"] == 75.0

    def test_overall_between_category_extremes(self):
        table = self.mk(
            [[True], [False], [True], [False], [False]],
            cats=["C", "C", "CE", "CE", "CV"],
        )
        sigma = table.sigma()
        cats = [sigma[c] for c in ("C", "CE", "CV")]
        assert min(cats) <= sigma["O"] <= max(cats)

    @given(
        st.lists(
            st.lists(st.booleans(), min_size=5, max_size=5), min_size=1, max_size=30
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_at_is_monotone_on_any_table(self, wins):
        table = self.mk(wins)
        rates = [table.at(k) for k in (1, 2, 3, 4, 5)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))


class TestEvalReport:
    def mk(self, **kw):
        base = dict(
            e_valid_clf=0.9,
            e_valid_sim=0.95,
            e_eff_clf=0.5,
            e_eff_sim=0.55,
            dgr=1.2,
            sigma={"C": 80.0, "CE": 60.0, "CV": 50.0, "O": 62.0},
            success_at_m={1: 62.0, 3: 70.0, 5: 75.0},
            sample_count=500,
        )
        base.update(kw)
        return EvalReport(**base)

    def test_json_round_trip(self):
        report = self.mk()
        obj = json.loads(report.to_json())
        assert obj["dgr"] == 1.2
        assert obj["sigma"]["O"] == 62.0
        assert obj["success_at_m"]["5"] == 75.0

    def test_csv_row_and_writer(self, tmp_path):
        path = str(tmp_path / "reports.csv")
        write_report_csv([("sft", self.mk()), ("rl", self.mk(dgr=1.0))], path)
        with open(path) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("label,e_valid_clf")
        assert lines[1].startswith("sft,")

    @pytest.mark.parametrize(
        "kw",
        [
            {"dgr": 0.9},
            {"e_valid_clf": 1.2},
            {"e_eff_sim": -0.1},
            {"sigma": {"O": 120.0}},
            {"success_at_m": {1: -5.0}},
        ],
    )
    def test_rejects_out_of_range(self, kw):
        with pytest.raises(ValueError):
            self.mk(**kw)


class TestEvaluatePolicy:
    def test_full_report_on_memorized_policy(self, buck_policy):
        prompts = [
            Prompt("C", BUCK_POOL),
            Prompt("CE", BUCK_POOL, eff_floor=0.6),
            Prompt("CV", BUCK_POOL, vout_relation=">", vout_bound=0.75, vin=2.0),
        ] * 2
        oracle = oracle_backend()
        report = evaluate_policy(
            buck_policy, prompts, clf_backend=oracle, oracle=oracle, rng_seed=3, m=3
        )
        assert report.sample_count == len(prompts) * 3
        assert report.e_valid_sim == 1.0
        assert report.e_valid_clf == report.e_valid_sim  # same backend twice
        assert report.dgr >= 1.0
        assert report.success_at_m[1] <= report.success_at_m[3]
        assert report.sigma["O"] == 100.0
