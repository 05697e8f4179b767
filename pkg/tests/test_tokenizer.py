import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from beyondlog import nn
from beyondlog import tokenizer as tk


def greedy_oracle(z, codebooks):
    """Plain-Python residual quantisation, first minimum wins."""
    r = [float(x) for x in z]
    codes = []
    for C in codebooks:
        best, best_d = 0, None
        for j, c in enumerate(C):
            d = sum((ri - float(ci)) ** 2 for ri, ci in zip(r, c))
            if best_d is None or d < best_d:
                best, best_d = j, d
        codes.append(best)
        r = [ri - float(ci) for ri, ci in zip(r, C[best])]
    return codes, r


def four_clusters(seed=0, n_per=40, d=16):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(4, d)) * 3
    x = np.concatenate([c + rng.normal(size=(n_per, d)) * 0.3 for c in centers])
    return x.astype(np.float32), np.repeat(np.arange(4), n_per)


class TestResidualQuantize:
    def test_exact_codeword(self):
        C = [np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[0.5, 0.5], [0.0, 0.0]])]
        codes, zhat, r = tk.residual_quantize(np.array([1.0, 2.0]), C)
        assert codes.tolist() == [1, 1]
        np.testing.assert_array_equal(r, [0.0, 0.0])

    def test_tie_goes_to_lower_index(self):
        C = [np.array([[1.0, 0.0], [-1.0, 0.0]])]
        codes, _, _ = tk.residual_quantize(np.array([0.0, 0.0]), C)
        assert codes.tolist() == [0]

    @given(hnp.arrays(np.float64, (4,), elements=st.floats(-3, 3)),
           hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-3, 3)))
    @settings(max_examples=80, deadline=None)
    def test_matches_oracle(self, z, books):
        codes, zhat, r = tk.residual_quantize(z, list(books))
        o_codes, o_r = greedy_oracle(z, list(books))
        assert codes.tolist() == o_codes
        np.testing.assert_allclose(r, o_r, atol=1e-9)
        np.testing.assert_allclose(zhat + r, z, atol=1e-9)

    def test_batch_equals_rows(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(7, 3))
        books = [rng.normal(size=(5, 3)) for _ in range(3)]
        codes, _, _ = tk.residual_quantize(z, books)
        for i in range(7):
            assert codes[i].tolist() == tk.residual_quantize(z[i], books)[0].tolist()


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_straight_through_loss(self, seed):
        rng = np.random.default_rng(seed)
        cfg = tk.RQVAEConfig(d=6, d_prime=3, levels=2, codebook_size=4)
        P = tk.init_params(cfg, rng).astype(np.float64)
        x = rng.normal(size=(3, 6))
        sg = nn.StopGradient()
        _, _, codes = tk.rqvae_terms(x, P.tensors(False), 2, sg=sg)
        sg.freeze()
        rep = nn.grad_check(lambda T: tk.rqvae_loss(x, T, 2, 0.25, codes, sg), P)
        assert rep.passed(1e-3), rep.max_rel_error

    def test_codebook_receives_commit_gradient_only_through_q(self):
        rng = np.random.default_rng(0)
        cfg = tk.RQVAEConfig(d=4, d_prime=2, levels=1, codebook_size=3)
        P = tk.init_params(cfg, rng).astype(np.float64)
        x = rng.normal(size=(2, 4))
        _, grads = nn.value_and_grad(lambda T: tk.rqvae_loss(x, T, 1, 0.25), P)
        _, _, picked = tk.rqvae_terms(x, P.tensors(False), 1)
        unused = sorted(set(range(3)) - set(picked[:, 0].tolist()))
        for j in unused:
            assert not grads["codebook.0"][j].any()


class TestTraining:
    def test_four_clusters(self):
        x, lab = four_clusters()
        cfg = tk.RQVAEConfig(d=16, d_prime=4, levels=1, codebook_size=4, epochs=40, batch_size=64)
        model = tk.train_rqvae(x, cfg)
        sids = tk.extract_sids(range(len(x)), x, model)
        codes = np.array([s.codes[0] for s in sids])
        agreement = np.mean([np.bincount(codes[lab == c]).max() / (lab == c).sum() for c in range(4)])
        assert agreement >= 0.9
        curve = model.loss_curve
        assert curve[-1]["recon"] < 0.25 * curve[0]["recon"]

    def test_sids_one_based_and_roundtrip(self, tmp_path):
        x, _ = four_clusters(1, 20, 8)
        model = tk.train_rqvae(x, tk.RQVAEConfig(d=8, d_prime=4, levels=2, codebook_size=4, epochs=2))
        sids = tk.extract_sids(list(range(100, 180)), x, model)
        assert all(1 <= c <= 4 for s in sids for c in s.codes) and len(sids[0].codes) == 2
        tk.save_sids(tmp_path / "sids.jsonl", sids)
        assert tk.load_sids(tmp_path / "sids.jsonl") == sids

    def test_deterministic(self):
        x, _ = four_clusters(3, 20, 8)
        cfg = tk.RQVAEConfig(d=8, d_prime=4, levels=2, codebook_size=4, epochs=3)
        a, b = tk.train_rqvae(x, cfg), tk.train_rqvae(x, cfg)
        for n in a.params.names():
            np.testing.assert_array_equal(a.params[n], b.params[n])

    def test_config_errors(self):
        with pytest.raises(tk.TokenizerConfigError):
            tk.RQVAEConfig(d=8, d_prime=8)
        with pytest.raises(tk.TokenizerConfigError):
            tk.train_rqvae(np.zeros((3, 32), dtype=np.float32), tk.RQVAEConfig())
        with pytest.raises(tk.TokenizerConfigError):
            tk.train_rqvae(np.zeros((100, 16), dtype=np.float32), tk.RQVAEConfig(codebook_size=8))
