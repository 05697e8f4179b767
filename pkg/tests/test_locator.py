import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beyondlog import baseline_rec as br
from beyondlog import locator as lc
from beyondlog.locator import FILL, MASK, OBS

PRIM = {0: "X", 1: "Y", 2: "X", 3: "Z"}


def cfg(**kw):
    return lc.LocatorConfig(**{"tau_time": 3600.0, "n_rank": 50, "tau_coh": 0.1, **kw})


class TestRuleFilter:
    def test_both_rules(self):
        assert lc.rule_filter([0, 1], [0, 7200], PRIM, cfg()) == [0]

    def test_same_category_fails_cd(self):
        assert lc.rule_filter([0, 2], [0, 7200], PRIM, cfg()) == []

    def test_td_alone(self):
        assert lc.rule_filter([0, 2], [0, 7200], PRIM, cfg(scheme="TD")) == [0]

    def test_cd_alone(self):
        assert lc.rule_filter([0, 1], [0, 60], PRIM, cfg(scheme="CD")) == [0]

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 9000)), min_size=2, max_size=10))
    @settings(max_examples=60, deadline=None)
    def test_union_contains_parts(self, pairs):
        items = [p[0] for p in pairs]
        ts = np.cumsum([p[1] for p in pairs]).tolist()
        td = set(lc.rule_filter(items, ts, PRIM, cfg(scheme="TD")))
        cd = set(lc.rule_filter(items, ts, PRIM, cfg(scheme="CD")))
        union = set(lc.rule_filter(items, ts, PRIM, cfg(scheme="TD_UNION_CD")))
        both = set(lc.rule_filter(items, ts, PRIM, cfg(scheme="TD_AND_CD")))
        assert union == td | cd
        assert both == td & cd


class TestModelFilter:
    def test_top1_dropped(self):
        m = br.CoocModel(3, window=1, counts={0: {1: 2.0}})
        assert lc.model_filter([0], m, [0, 1], cfg(n_rank=1)) == []

    def test_uniform_all_dropped(self):
        m = br.CoocModel(5)
        assert lc.model_filter([0, 1, 2], m, [0, 4, 3, 2], cfg(n_rank=5)) == []

    def test_low_rank_kept(self):
        # p(.|[0]) = (1/6, 3/6, 2/6): item 0 ranks 3rd
        m = br.CoocModel(3, window=1, counts={0: {1: 2.0, 2: 1.0}})
        assert br.rank_of(m, [0], 0) == 3
        assert lc.model_filter([0], m, [0, 0], cfg(n_rank=2)) == [0]


class TestLabelPositions:
    def test_hand_delta(self):
        m = br.CoocModel(3, window=1, counts={0: {1: 2.0}})
        # sequence [c, a, b] with a=0, b=1, c=2
        dp = lc.delta_p(m, [2, 0, 1])
        assert dp[1] == pytest.approx(0.6 - 1 / 3)
        assert lc.label_positions(m, [2, 0, 1], cfg(tau_coh=0.1)) == [1]

    def test_irrelevant_item_never_labelled(self):
        m = br.CoocModel(3)
        assert lc.label_positions(m, [0, 1, 2, 0], cfg(tau_coh=1e-9)) == []

    def test_tau_one_empty(self):
        m = br.fit([[0, 1, 2, 1, 0]], 3)
        assert lc.label_positions(m, [0, 1, 2, 1], cfg(tau_coh=1.0)) == []

    def test_short_sequence_skipped(self):
        assert lc.label_positions(br.CoocModel(3), [0, 1], cfg()) == []

    def test_gap_wins_conflicts(self):
        m = br.CoocModel(3, window=1, counts={0: {1: 2.0}})
        assert lc.label_positions(m, [2, 0, 1], cfg(), p_u=[1]) == []

    @given(st.lists(st.lists(st.integers(0, 4), min_size=3, max_size=8), min_size=1, max_size=4),
           st.floats(0.001, 0.5), st.floats(0.001, 0.5))
    @settings(max_examples=50, deadline=None)
    def test_tau_coh_monotone(self, seqs, a, b):
        lo, hi = sorted((a, b))
        m = br.fit(seqs, 5, window=2)
        for s in seqs:
            assert set(lc.label_positions(m, s, cfg(tau_coh=hi))) <= set(lc.label_positions(m, s, cfg(tau_coh=lo)))

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=8), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=50, deadline=None)
    def test_n_rank_monotone(self, seq, a, b):
        lo, hi = sorted((a, b))
        m = br.fit([seq, seq[::-1]], 5, window=2)
        cands = list(range(len(seq) - 1))
        assert set(lc.model_filter(cands, m, seq, cfg(n_rank=hi))) <= set(lc.model_filter(cands, m, seq, cfg(n_rank=lo)))


class TestTokenSequences:
    def test_no_positions_identity(self):
        ts = lc.build_token_sequence(0, [3, 4, 5], [], [])
        assert [(s.kind, s.item_id) for s in ts.slots] == [(OBS, 3), (OBS, 4), (OBS, 5)]

    def test_gap_inserts_fill(self):
        ts = lc.build_token_sequence(0, [3, 4, 5], [], [0])
        assert [s.kind for s in ts.slots] == [OBS, FILL, OBS, OBS]

    def test_label_replaces(self):
        ts = lc.build_token_sequence(0, [3, 4, 5], [1], [])
        assert ts.slots[1] == lc.Slot(MASK, 4) and len(ts.slots) == 3

    def test_overlap_rejected(self):
        with pytest.raises(lc.OverlapError):
            lc.build_token_sequence(0, [3, 4, 5], [1], [1])

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=12), st.data())
    @settings(max_examples=60, deadline=None)
    def test_order_preserved(self, items, data):
        idx = list(range(len(items)))
        p_u = data.draw(st.sets(st.sampled_from(idx)))
        p_l = data.draw(st.sets(st.sampled_from(idx)).map(lambda s: s - p_u))
        ts = lc.build_token_sequence(0, items, sorted(p_l), sorted(p_u))
        assert [s.item_id for s in ts.slots if s.kind in (OBS, MASK)] == items
        assert len(ts.slots) == len(items) + len(p_u)

    def test_jsonl_roundtrip(self, tmp_path):
        seqs = [lc.build_token_sequence(7, [1, 2, 3, 4], [2], [0]), lc.build_token_sequence(8, [9], [], [])]
        lc.save_token_sequences(tmp_path / "t.jsonl", seqs)
        assert lc.load_token_sequences(tmp_path / "t.jsonl") == seqs
        first = (tmp_path / "t.jsonl").read_text().splitlines()[0]
        assert '"tag": "fill"' in first and '"tag": "mask"' in first


class TestGapScoring:
    def test_precision_recall(self):
        p, r = lc.gap_precision_recall([[0, 2], [1]], [[2], [1, 3]])
        assert (p, r) == (2 / 3, 2 / 3)

    def test_random_baseline(self):
        assert lc.random_baseline_precision([4, 3], [[1], [0]]) == pytest.approx(2 / 5)

    def test_bad_config(self):
        for kw in ({"tau_time": 0}, {"n_rank": 0}, {"tau_coh": 0}, {"scheme": "XX"}):
            with pytest.raises(ValueError):
                cfg(**kw)
