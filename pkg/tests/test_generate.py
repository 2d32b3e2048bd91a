import itertools
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convsynth.generate import (
    CE_FLOOR_GRID,
    DUTY_CYCLES,
    GROUP_WEIGHTS,
    KIND_ORDER,
    DatasetRecord,
    EmptyDataset,
    InvalidInput,
    MissingConstraint,
    Prompt,
    SpaceExhausted,
    assign_group,
    build_dataset,
    build_prompt,
    generate_unique,
    pool_of,
    prompt_for_record,
    prompt_from_obj,
    prompt_to_obj,
    random_topology,
    record_from_obj,
    record_to_obj,
    render_prompt,
    sweep_duties,
    weighted_sample,
)
from convsynth.netlist import (
    Device,
    Entry,
    Kind,
    Netlist,
    canonical_key,
    emit_triple_list,
    has_structural_errors,
    parse_triple_list,
    structural_check,
)
from convsynth.sim import Design, SimResult

BUCK = "[['FET-B-0','IN','1'],['FET-A-0','1','0'],['inductor-0','1','OUT'],['capacitor-0','OUT','0']]"


def mk_record(eff, vout, group, category="C"):
    nl = parse_triple_list(BUCK)
    sim = SimResult(True, vout, eff, 10)
    return DatasetRecord(Prompt(category, pool_of(nl)), Design(nl, 0.5), sim, group)


class TestRandomTopology:
    def test_deterministic_and_clean(self):
        a = random_topology(4, rng_seed=7)
        b = random_topology(4, rng_seed=7)
        assert a == b
        assert len(a.entries) == 4
        assert not has_structural_errors(a)

    def test_seed_changes_output(self):
        outs = {emit_triple_list(random_topology(5, rng_seed=s)) for s in range(8)}
        assert len(outs) > 1

    @pytest.mark.parametrize("n", [3, 0, 11, -1])
    def test_out_of_range_count(self, n):
        with pytest.raises(ValueError):
            random_topology(n, rng_seed=0)

    def test_many_draws_all_structurally_clean(self):
        # 10,000 draws, every one must pass the structural rules
        import random as _random
        from convsynth.generate import _draw_topology, _node_pool

        rng = _random.Random(123)
        pool = _node_pool(4, None)
        for _ in range(10_000):
            nl = _draw_topology(4, rng, retries=500, nodes=pool)
            assert len(nl.entries) == 4
            assert not has_structural_errors(nl)
            assert any(e.device.kind.is_switch for e in nl.entries)

    def test_gate_rails_not_assignable(self):
        with pytest.raises(ValueError):
            random_topology(4, rng_seed=0, node_pool=("IN", "OUT", "GATEN"))
        with pytest.raises(ValueError):
            random_topology(4, rng_seed=0, node_pool=())


class TestGenerateUnique:
    def test_small_target_distinct_keys(self):
        out = generate_unique(4, 10, rng_seed=3)
        assert len(out) == 10
        assert len({canonical_key(n) for n in out}) == 10

    def test_deterministic(self):
        a = [emit_triple_list(n) for n in generate_unique(5, 25, rng_seed=9)]
        b = [emit_triple_list(n) for n in generate_unique(5, 25, rng_seed=9)]
        assert a == b

    def test_larger_run_stays_distinct(self):
        out = generate_unique(4, 300, rng_seed=1)
        assert len({canonical_key(n) for n in out}) == 300

    def test_impossible_target_reports_partial(self):
        with pytest.raises(SpaceExhausted) as exc:
            generate_unique(4, 10**9, rng_seed=2, max_draws=400)
        got = exc.value.netlists
        assert 0 < len(got) < 10**9
        assert exc.value.draws == 400
        assert len({canonical_key(n) for n in got}) == len(got)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            generate_unique(4, 0, rng_seed=0)

    def test_two_seeds_saturate_restricted_space(self):
        # The full 4-component space is far too large to saturate by random
        # draws, so the coverage property is checked on the subspace whose
        # terminals sit on IN/OUT only (ground arrives via the FET-A bias
        # net). That space is enumerable exactly.
        nodes = ("IN", "OUT")
        pairs = [(a, b) for a in nodes for b in nodes if a != b]
        types = [(k, p) for k in Kind for p in pairs]
        truth = set()
        for combo in itertools.combinations_with_replacement(types, 4):
            if not any(k.is_switch for k, _ in combo):
                continue
            idx = {k: 0 for k in Kind}
            entries = []
            for k, p in combo:
                entries.append(Entry(Device(k, idx[k]), p))
                idx[k] += 1
            nl = Netlist(tuple(entries))
            if not has_structural_errors(nl):
                truth.add(canonical_key(nl))
        assert len(truth) == 204

        found = []
        for seed in (11, 97):
            with pytest.raises(SpaceExhausted) as exc:
                generate_unique(4, 10**9, seed, max_draws=8000, node_pool=nodes)
            found.append({canonical_key(n) for n in exc.value.netlists})
        assert found[0] == truth
        assert found[1] == truth


class TestSweepDuties:
    def test_five_designs_ascending(self):
        nl = parse_triple_list(BUCK)
        designs = sweep_duties(nl)
        assert [d.duty for d in designs] == list(DUTY_CYCLES)
        assert all(d.netlist == nl for d in designs)

    def test_scales_linearly(self):
        nets = generate_unique(4, 100, rng_seed=5)
        designs = [d for n in nets for d in sweep_duties(n)]
        assert len(designs) == 500


class TestAssignGroup:
    def test_reference_points(self):
        assert assign_group(SimResult(True, 1.0, 0.03, 5)) == "G1"
        assert assign_group(SimResult(True, 1.0, 0.5, 5)) == "G2"
        assert assign_group(SimResult(True, 1.0, 0.9, 5), vin=2.0) == "G4"
        assert assign_group(SimResult(True, 1.9, 0.9, 5), vin=2.0) == "G3"

    def test_boundaries_left_closed(self):
        assert assign_group(SimResult(True, 1.0, 0.05, 5)) == "G2"
        assert assign_group(SimResult(True, 1.0, 0.7, 5)) == "G2"
        assert assign_group(SimResult(True, 1.0, 0.0499, 5)) == "G1"

    def test_vout_band_is_two_sided(self):
        assert assign_group(SimResult(True, 1.75, 0.71, 5), vin=2.0) == "G4"
        assert assign_group(SimResult(True, 2.25, 0.71, 5), vin=2.0) == "G4"
        assert assign_group(SimResult(True, 1.85, 0.71, 5), vin=2.0) == "G3"
        assert assign_group(SimResult(True, 2.15, 0.71, 5), vin=2.0) == "G3"

    def test_invalid_rejected(self):
        with pytest.raises(InvalidInput):
            assign_group(SimResult(False, 0.0, 0.0, 0, "Structural"))

    def test_partition_covers_grid(self):
        effs = [0.0, 0.04, 0.05, 0.3, 0.7, 0.71, 0.99]
        vouts = [0.1, 1.85, 2.0, 2.3, 9.0]
        seen = set()
        for e in effs:
            for v in vouts:
                seen.add(assign_group(SimResult(True, v, e, 5), vin=2.0))
        assert seen == {"G1", "G2", "G3", "G4"}


class TestWeightedSample:
    def test_empty_pool(self):
        with pytest.raises(EmptyDataset):
            weighted_sample([], 5, rng_seed=0)

    def test_zero_batch(self):
        assert weighted_sample([mk_record(0.9, 1.0, "G4")], 0, rng_seed=0) == []

    def test_single_group_pool(self):
        pool = [mk_record(0.9, 1.0, "G4") for _ in range(3)]
        out = weighted_sample(pool, 50, rng_seed=1)
        assert len(out) == 50
        assert all(r.group == "G4" for r in out)

    def test_balanced_pool_frequencies(self):
        pool = (
            [mk_record(0.01, 1.0, "G1")] * 5
            + [mk_record(0.5, 1.0, "G2")] * 5
            + [mk_record(0.9, 1.95, "G3")] * 5
            + [mk_record(0.9, 1.0, "G4")] * 5
        )
        out = weighted_sample(pool, 10_000, rng_seed=42)
        freq = Counter(r.group for r in out)
        for g, w in GROUP_WEIGHTS.items():
            assert abs(freq[g] / 10_000 - w) < 0.03

    def test_missing_group_redistributes(self):
        pool = (
            [mk_record(0.5, 1.0, "G2")] * 4
            + [mk_record(0.9, 1.95, "G3")] * 4
            + [mk_record(0.9, 1.0, "G4")] * 4
        )
        out = weighted_sample(pool, 10_000, rng_seed=7)
        freq = Counter(r.group for r in out)
        assert freq["G1"] == 0
        # weights renormalize over the surviving groups: 0.4 / 0.9
        assert abs(freq["G4"] / 10_000 - 0.4 / 0.9) < 0.03

    def test_deterministic(self):
        pool = [mk_record(0.5, 1.0, "G2"), mk_record(0.9, 1.0, "G4")]
        a = [id(r) for r in weighted_sample(pool, 30, rng_seed=3)]
        b = [id(r) for r in weighted_sample(pool, 30, rng_seed=3)]
        assert a == b


class TestPromptRendering:
    def test_efficiency_prompt_matches_reference_row(self):
        p = Prompt("CE", (1, 1, 1, 1), eff_floor=0.6)
        text = render_prompt(p)
        assert text == (
            "Generate a 4-component circuit with capacitor: capacitor-0; "
            "inductor: inductor-0; n-type MOSFET: FET-A-0; and p-type MOSFET: "
            "FET-B-0; representing different nodes: ['capacitor-0', "
            "'inductor-0', 'FET-A-0', 'FET-B-0'] with efficiency greater than 0.6"
        )

    def test_voltage_prompt_suffix(self):
        p = Prompt("CV", (2, 0, 1, 1), vout_relation="<", vout_bound=1.5, vin=2.0)
        text = render_prompt(p)
        assert text.endswith("with Vout less than 1.5V when Vin equals 2V")
        assert "capacitors: capacitor-0 and capacitor-1" in text

    def test_plain_prompt_pool_listing(self):
        p = Prompt("C", (0, 0, 3, 1))
        text = render_prompt(p)
        assert (
            "n-type MOSFETs: FET-A-0, FET-A-1 and FET-A-2; and p-type MOSFET: FET-B-0"
            in text
        )
        assert not text.endswith("V")
        assert "efficiency" not in text

    def test_empty_pool_rejected(self):
        with pytest.raises(MissingConstraint):
            build_prompt((0, 0, 0, 0), "C")

    def test_category_field_consistency(self):
        with pytest.raises(MissingConstraint):
            Prompt("CE", (1, 0, 1, 1))
        with pytest.raises(MissingConstraint):
            Prompt("CV", (1, 0, 1, 1), vout_relation="<", vout_bound=1.5)
        with pytest.raises(InvalidInput):
            Prompt("C", (1, 0, 1, 1), eff_floor=0.5)
        with pytest.raises(InvalidInput):
            Prompt("X", (1, 0, 1, 1))

    def test_rendering_injective(self):
        prompts = []
        pools = [(1, 1, 1, 1), (2, 0, 1, 1), (0, 1, 2, 0), (1, 0, 0, 3)]
        for pool in pools:
            prompts.append(Prompt("C", pool))
            for f in CE_FLOOR_GRID:
                prompts.append(Prompt("CE", pool, eff_floor=f))
            for rel in ("<", ">"):
                for b in (0.25, 0.5, 1.5):
                    prompts.append(
                        Prompt("CV", pool, vout_relation=rel, vout_bound=b, vin=2.0)
                    )
        texts = [render_prompt(p) for p in prompts]
        assert len(set(texts)) == len(texts)


class TestPromptFromRecord:
    def test_ce_floor_is_largest_below_achieved(self):
        r = mk_record(0.65, 1.0, "G2")
        p = prompt_for_record(r.design, r.sim, "CE")
        assert p.eff_floor == 0.6

    def test_ce_infeasible_for_low_efficiency(self):
        r = mk_record(0.2, 1.0, "G2")
        with pytest.raises(MissingConstraint):
            prompt_for_record(r.design, r.sim, "CE")

    @pytest.mark.parametrize(
        "vout,bound,rel",
        [(0.8, 0.75, ">"), (0.1, 0.25, "<"), (1.3, 1.25, ">"), (0.6, 0.5, ">")],
    )
    def test_cv_bound_nearest_grid_point(self, vout, bound, rel):
        r = mk_record(0.5, vout, "G2")
        p = prompt_for_record(r.design, r.sim, "CV")
        assert p.vout_bound == pytest.approx(bound)
        assert p.vout_relation == rel
        # the record must actually satisfy its own constraint
        assert (r.sim.vout < p.vout_bound) == (p.vout_relation == "<")

    def test_build_prompt_accepts_record_prompt_and_pool(self):
        r = mk_record(0.65, 1.0, "G2")
        p1, t1 = build_prompt(r, "CE")
        assert p1.category == "CE" and "0.6" in t1
        p2, t2 = build_prompt(p1, "CE")
        assert (p2, t2) == (p1, t1)
        p3, t3 = build_prompt((1, 1, 1, 1), "C")
        assert p3.category == "C" and t3.startswith("Generate a 4-component")


class TestDatasetBuild:
    def test_records_are_consistent(self):
        build = build_dataset(4, 40, rng_seed=0)
        assert build.unique_netlists == 40
        assert len(build.all_designs) == 200
        assert build.records
        for r in build.records:
            assert r.sim.valid
            assert r.group == assign_group(r.sim, vin=2.0)
            assert pool_of(r.design.netlist) == r.prompt.pool
            render_prompt(r.prompt)

    def test_round_trip_records(self):
        build = build_dataset(4, 15, rng_seed=4)
        for r in build.records:
            assert record_from_obj(record_to_obj(r)) == r

    def test_deterministic(self):
        a = build_dataset(4, 15, rng_seed=8)
        b = build_dataset(4, 15, rng_seed=8)
        assert [record_to_obj(r) for r in a.records] == [
            record_to_obj(r) for r in b.records
        ]


@st.composite
def prompt_strategy(draw):
    pool = tuple(
        draw(st.lists(st.integers(0, 3), min_size=4, max_size=4).filter(lambda c: sum(c) > 0))
    )
    cat = draw(st.sampled_from(["C", "CE", "CV"]))
    if cat == "C":
        return Prompt("C", pool)
    if cat == "CE":
        return Prompt("CE", pool, eff_floor=draw(st.sampled_from(CE_FLOOR_GRID)))
    return Prompt(
        "CV",
        pool,
        vout_relation=draw(st.sampled_from(["<", ">"])),
        vout_bound=draw(st.sampled_from([0.25, 0.5, 0.75, 1.0, 1.5])),
        vin=2.0,
    )


@settings(max_examples=60, deadline=None)
@given(prompt_strategy())
def test_prompt_json_round_trip(p):
    assert prompt_from_obj(prompt_to_obj(p)) == p
    render_prompt(p)
