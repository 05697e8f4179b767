import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beyondlog import nn
from beyondlog.nn import F


def _identity_attention(d=2):
    store = nn.ParamStore()
    for part in "qkvo":
        store.add(f"attn.{part}.w", np.eye(d, dtype=np.float32))
        store.add(f"attn.{part}.b", np.zeros(d, dtype=np.float32))
    return store


class TestLinear:
    def test_identity(self):
        out = nn.linear_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out.data, [[1, 2]])

    def test_swap(self):
        out = nn.linear_forward(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2))
        np.testing.assert_array_equal(out.data, [[0, 1]])

    def test_sum_plus_bias(self):
        out = nn.linear_forward(np.array([[1.0, 1.0]]), np.array([[1.0], [1.0]]), np.array([3.0]))
        np.testing.assert_array_equal(out.data, [[5]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nn.ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
            nn.linear_forward(np.ones((1, 3)), np.eye(2), np.zeros(2))


class TestAttention:
    def test_single_key_weight_is_one(self):
        rng = np.random.default_rng(1)
        store = nn.ParamStore()
        nn.add_attention(store, rng, "attn", 4)
        P = store.tensors(False)
        _, w = nn.multi_head_attention(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4)),
                                       P, 2, return_weights=True)
        np.testing.assert_allclose(w.data, 1.0)

    def test_identical_keys_split_evenly(self):
        P = _identity_attention().tensors(False)
        k = np.array([[0.3, 0.9], [0.3, 0.9]])
        _, w = nn.multi_head_attention(np.array([[1.0, 0.0]]), k, k, P, 1, return_weights=True)
        np.testing.assert_allclose(w.data, 0.5, atol=1e-7)

    def test_hand_softmax(self):
        P = _identity_attention().tensors(False)
        k = np.array([[1.0, 0.0], [0.0, 1.0]])
        out, w = nn.multi_head_attention(np.array([[1.0, 0.0]]), k, k, P, 1, return_weights=True)
        # logits [1/sqrt(2), 0]
        e = math.exp(1 / math.sqrt(2))
        expected = [e / (e + 1), 1 / (e + 1)]
        np.testing.assert_allclose(w.data[0, 0], expected, atol=1e-6)
        np.testing.assert_allclose(w.data[0, 0], [0.6698, 0.3302], atol=1e-4)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)

    def test_empty_context(self):
        P = _identity_attention().tensors(False)
        with pytest.raises(nn.EmptyContextError):
            nn.multi_head_attention(np.ones((1, 2)), np.ones((0, 2)), np.ones((0, 2)), P, 1)

    def test_heads_must_divide_width(self):
        rng = np.random.default_rng(0)
        store = nn.ParamStore()
        nn.add_attention(store, rng, "attn", 6)
        with pytest.raises(nn.ConfigError):
            nn.multi_head_attention(np.ones((1, 6)), np.ones((2, 6)), np.ones((2, 6)), store.tensors(False), 4)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 7), heads=st.sampled_from([1, 2, 4]))
    def test_rows_sum_to_one_and_key_permutation_equivariant(self, seed, n, heads):
        rng = np.random.default_rng(seed)
        store = nn.ParamStore()
        nn.add_attention(store, rng, "attn", 8)
        P = store.tensors(False)
        q = rng.normal(size=(3, 8)).astype(np.float32)
        kv = rng.normal(size=(n, 8)).astype(np.float32)
        out, w = nn.multi_head_attention(q, kv, kv, P, heads, return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-5)
        perm = rng.permutation(n)
        out2 = nn.multi_head_attention(q, kv[perm], kv[perm], P, heads)
        np.testing.assert_allclose(out.data, out2.data, atol=1e-5)

    def test_key_mask_ignores_padding(self):
        rng = np.random.default_rng(3)
        store = nn.ParamStore()
        nn.add_attention(store, rng, "attn", 4)
        P = store.tensors(False)
        q = rng.normal(size=(1, 2, 4))
        kv = rng.normal(size=(1, 3, 4))
        padded = np.concatenate([kv, rng.normal(size=(1, 2, 4)) * 50], axis=1)
        mask = np.array([[True, True, True, False, False]])
        a = nn.multi_head_attention(q, kv, kv, P, 2)
        b = nn.multi_head_attention(q, padded, padded, P, 2, key_mask=mask)
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)


class TestAdam:
    def test_one_step_by_hand(self):
        store = nn.ParamStore()
        store.add("theta", np.zeros(1, dtype=np.float32))
        cfg = nn.OptimConfig(learning_rate=0.0075, warmup_steps=0, total_steps=10)
        nn.adam_step(store, {"theta": np.ones(1, dtype=np.float32)}, cfg, step=0)
        # m_hat = v_hat = 1 -> update = lr * 1 / (1 + eps)
        np.testing.assert_allclose(store["theta"], [-0.0075], rtol=1e-6)

    def test_zero_gradient_leaves_values(self):
        store = nn.ParamStore()
        store.add("theta", np.array([1.0, -2.0], dtype=np.float32))
        cfg = nn.OptimConfig(warmup_steps=0, total_steps=10)
        nn.adam_step(store, {"theta": np.array([0.5, 0.5], dtype=np.float32)}, cfg, 1)
        before = store["theta"].copy()
        nn.adam_step(store, {"theta": np.zeros(2, dtype=np.float32)}, cfg, 2)
        nn.adam_step(store, {"theta": np.zeros(2, dtype=np.float32)}, cfg, 2)
        np.testing.assert_array_equal(store["theta"], before)

    def test_bad_gradient_names(self):
        store = nn.ParamStore()
        store.add("w", np.zeros((2, 2), dtype=np.float32))
        cfg = nn.OptimConfig()
        with pytest.raises(KeyError, match="nope"):
            nn.adam_step(store, {"nope": np.zeros(2)}, cfg, 1)
        with pytest.raises(ValueError, match="'w'"):
            nn.adam_step(store, {"w": np.zeros(3)}, cfg, 1)


class TestSchedule:
    cfg = nn.OptimConfig(learning_rate=0.0075, warmup_steps=100, total_steps=1100, min_lr_fraction=0.0)

    def test_warmup_start(self):
        assert nn.lr_schedule(0, self.cfg) == 0.0

    def test_peak_is_base(self):
        assert nn.lr_schedule(100, self.cfg) == pytest.approx(0.0075)

    def test_decay_midpoint(self):
        assert nn.lr_schedule(600, self.cfg) == pytest.approx(0.0075 / 2)

    def test_clamped_after_total(self):
        cfg = nn.OptimConfig(learning_rate=1.0, warmup_steps=0, total_steps=10, min_lr_fraction=0.1)
        assert nn.lr_schedule(50, cfg) == pytest.approx(0.1)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            nn.OptimConfig(beta1=1.0)
        with pytest.raises(ValueError):
            nn.OptimConfig(warmup_steps=10, total_steps=5)


class TestGradCheck:
    def test_quadratic(self):
        store = nn.ParamStore()
        store.add("theta", np.array([3.0], dtype=np.float32))
        rep = nn.grad_check(lambda P: (P["theta"] * P["theta"]).sum() * 0.5, store, eps=1e-3)
        assert rep.analytic["theta"][0] == pytest.approx(3.0)
        assert rep.numeric["theta"][0] == pytest.approx(3.0, rel=1e-6)
        assert rep.worst < 1e-6

    def test_constant_loss(self):
        store = nn.ParamStore()
        store.add("theta", np.array([3.0], dtype=np.float32))
        rep = nn.grad_check(lambda P: (P["theta"] * 0.0).sum() + 2.0, store)
        assert rep.analytic["theta"][0] == 0.0
        assert rep.numeric["theta"][0] == 0.0

    def test_non_finite_loss(self):
        store = nn.ParamStore()
        store.add("theta", np.array([-1.0], dtype=np.float32))
        with pytest.raises(nn.NonFiniteLossError):
            nn.grad_check(lambda P: F.log(P["theta"]).sum(), store)

    @pytest.mark.parametrize("seed", range(5))
    def test_ops_used_by_models(self, seed):
        rng = np.random.default_rng(seed)
        store = nn.ParamStore()
        nn.add_linear(store, rng, "lin", 5, 4)
        nn.add_layer_norm(store, "ln", 4)
        store.params["ln.g"][:] = rng.normal(size=4)
        x = rng.normal(size=(3, 5))
        y = (rng.random(3) > 0.5).astype(float)

        def loss(P):
            h = nn.layer_norm(F.gelu(nn.linear(x, P, "lin")), P, "ln")
            z = F.l2_normalize(h)
            s = F.log_softmax(z * 3.0, axis=-1)[:, 0]
            logit = F.tanh(h).sum(axis=-1) + F.sigmoid(h).mean(axis=-1)
            return F.bce_with_logits(logit, y) - s.mean() + F.concat([h, z], axis=-1).sum(axis=0)[2]

        rep = nn.grad_check(loss, store)
        assert rep.worst < 1e-3, rep.max_rel_error

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_gradients(self, seed):
        rng = np.random.default_rng(100 + seed)
        store = nn.ParamStore()
        nn.add_attention(store, rng, "attn", 8)
        q = rng.normal(size=(2, 3, 8))
        kv = rng.normal(size=(2, 5, 8))
        mask = np.ones((2, 5), dtype=bool)
        mask[1, 3:] = False
        target = rng.normal(size=(2, 3, 8))

        def loss(P):
            out = nn.multi_head_attention(q, kv, kv, P, 4, key_mask=mask)
            return ((out - target) * (out - target)).mean()

        rep = nn.grad_check(loss, store)
        assert rep.worst < 1e-3, rep.max_rel_error
