import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beyondlog import metrics
from beyondlog import worldgen as wg

SMALL = dict(n_items=96, n_categories=8, n_spu_groups=40, n_users=60)


@pytest.fixture(scope="module")
def default_world():
    w = wg.generate_world(wg.WorldConfig())
    full = wg.generate_sequences(w)
    obs, truths = wg.censor(w, full)
    return w, full, obs, truths


def small(**kw):
    cfg = wg.WorldConfig(**{**SMALL, **kw})
    w = wg.generate_world(cfg)
    full = wg.generate_sequences(w)
    obs, truths = wg.censor(w, full)
    return w, full, obs, truths


class TestCatalog:
    def test_deterministic(self):
        a, b = wg.generate_world(wg.WorldConfig(**SMALL)), wg.generate_world(wg.WorldConfig(**SMALL))
        assert [it.knowledge for it in a.items] == [it.knowledge for it in b.items]
        np.testing.assert_array_equal(a.topic_vectors, b.topic_vectors)

    def test_spu_groups_stay_in_topic_and_differ_by_color(self, default_world):
        w = default_world[0]
        groups = {}
        for it in w.items:
            groups.setdefault(it.spu_id, []).append(it)
        for members in groups.values():
            assert len({m.topic for m in members}) == 1
            for m in members[1:]:
                for e0, e1 in zip(members[0].knowledge.product_attribute, m.knowledge.product_attribute):
                    if e0.dimension != "color":
                        assert e0.keywords == e1.keywords

    def test_knowledge_is_valid(self, default_world):
        for it in default_world[0].items:
            assert it.knowledge.validate() == []

    def test_adjacent_topics_change_primary(self):
        cfg = wg.WorldConfig()
        for k in range(cfg.n_categories):
            nxt = (k + 1) % cfg.n_categories
            assert wg.category_path(k, cfg)[0] != wg.category_path(nxt, cfg)[0]

    def test_complements_in_topic(self):
        w = wg.generate_world(wg.WorldConfig(**SMALL, complement_fanout=3))
        for it in w.items:
            assert len(it.complements) == 3
            assert all(w.items[c].topic == it.topic for c in it.complements)

    def test_generic_dimension(self):
        w = wg.generate_world(wg.WorldConfig(**SMALL, generic_dim=True))
        assert all(any(e.dimension == wg.GENERIC_DIM for e in it.knowledge.user_demand) for it in w.items)

    @pytest.mark.parametrize("kw", [{"n_items": 0}, {"hide_prob": 1.5}, {"sessions_min": 5, "sessions_max": 2},
                                    {"n_categories": 1}, {"click_noise": -1.0}, {"n_items": 4}])
    def test_bad_config(self, kw):
        with pytest.raises(wg.WorldConfigError):
            wg.WorldConfig(**kw)

    def test_unknown_preset(self):
        with pytest.raises(wg.WorldConfigError):
            wg.preset("nope")


class TestSequences:
    def test_timestamps_increase(self, default_world):
        for s in default_world[1]:
            ts = [e.ts for e in s.events]
            assert ts == sorted(ts)

    def test_tau_time_sits_between_gap_regimes(self, default_world):
        tau = wg.session_gap_quantile(default_world[1])
        cfg = default_world[0].config
        assert cfg.intra_gap_min < tau < cfg.inter_gap_min

    @given(st.integers(0, 50), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=15, deadline=None)
    def test_reinsert_recovers_full(self, seed, hide, det):
        w, full, obs, truths = small(seed=seed, hide_prob=hide, detectable_frac=det)
        for f, o, t in zip(full, obs, truths):
            assert wg.reinsert(t) == [e.item_id for e in f.events]
            assert [e.item_id for e in o] == [e.item_id for e in t.full if e.channel == wg.PLATFORM]

    def test_no_hiding_no_gaps(self):
        _, full, obs, truths = small(hide_prob=0.0)
        assert all(not t.gaps for t in truths)
        assert [len(o) for o in obs] == [len(f.events) for f in full]

    def test_detectable_gaps_cross_primaries(self, default_world):
        w, _, obs, truths = default_world
        for o, t in zip(obs, truths):
            for g in t.gaps:
                if g.detectable and 0 <= g.after_index < len(o) - 1:
                    a, b = o[g.after_index].item_id, o[g.after_index + 1].item_id
                    assert w.items[a].primary() != w.items[b].primary()

    def test_default_gap_mix(self, default_world):
        gaps = [g for t in default_world[3] for g in t.gaps]
        share = np.mean([g.detectable for g in gaps])
        assert len(gaps) > 500 and 0.7 < share < 0.95

    def test_external_topic_fully_hidden(self):
        cfg = wg.preset("gbr_value", **SMALL)
        w = wg.generate_world(cfg)
        full = wg.generate_sequences(w)
        obs, truths = wg.censor(w, full)
        n_hidden = 0
        for u, (o, t) in enumerate(zip(obs, truths)):
            ext = w.users[u].external
            assert ext is not None
            assert all(w.items[e.item_id].topic != ext for e in o)
            n_hidden += sum(len(g.hidden_item_ids) for g in t.gaps)
        assert n_hidden > 0


class TestClicks:
    def test_noiseless_is_step(self):
        cfg = wg.WorldConfig(click_noise=0.0)
        np.testing.assert_array_equal(wg.click_probability(np.array([0.1, 0.3]), cfg), [0.0, 1.0])

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=20))
    @settings(max_examples=30, deadline=None)
    def test_monotone(self, aff):
        a = np.sort(np.asarray(aff))
        p = wg.click_probability(a, wg.WorldConfig())
        assert (np.diff(p) >= -1e-12).all()

    def test_bayes_scores_separate(self, default_world):
        w, _, obs, truths = default_world
        imps = wg.label_clicks(w, obs, truths=truths)
        y = [i.label for i in imps]
        assert 0.3 < np.mean(y) < 0.7
        assert metrics.auc([i.bayes for i in imps], y) > 0.9

    def test_impression_features(self, default_world):
        w, _, obs, _ = default_world
        imps = wg.label_clicks(w, obs[:5])
        assert len(imps) == 5 * w.config.impressions_per_user
        assert all(len(i.f_u) == 2 and len(i.f_c) == 2 for i in imps)
