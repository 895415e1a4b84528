import math

import numpy as np
import pytest

from textssm import autodiff as ad
from textssm.autodiff import finite_diff_check
from textssm.model import (
    FrameScores,
    ModelConfig,
    TmMamba,
    TmMambaBlock,
    block_forward,
    load_checkpoint,
    loss_ce,
    save_checkpoint,
)
from textssm.graph import default_skeleton


def tiny(**kw):
    base = dict(D=8, N=4, V=4, num_blocks=1, expansion=1, max_len=300)
    base.update(kw)
    return ModelConfig(**base)


def make_block(seed=0, **kw):
    c = tiny(**kw)
    return TmMambaBlock(c, default_skeleton(c.V), np.random.default_rng(seed))


def unit(rng, D):
    q = rng.normal(size=D)
    return q / np.linalg.norm(q)


class TestConfig:
    def test_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(D=0)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"D": 8, "width": 3})


class TestBlock:
    @pytest.mark.parametrize("shape", [(4, 1, 8), (4, 7, 8), (2, 4, 9, 8)])
    def test_shape(self, rng, shape):
        out = block_forward(rng.normal(size=shape), unit(rng, 8), make_block())
        assert out.shape == shape

    def test_residual_identity(self, rng):
        blk = make_block()
        for p in blk.parameters():
            p.data[...] = 0.0
        X = rng.normal(size=(4, 6, 8))
        np.testing.assert_array_equal(block_forward(X, unit(rng, 8), blk).data, X)

    def test_time_reversal(self, rng):
        blk = make_block(seed=3)
        X, q = rng.normal(size=(4, 11, 8)), unit(rng, 8)
        fwd = block_forward(X, q, blk).data
        blk.swap_directions()
        rev = block_forward(X[:, ::-1], q, blk).data
        np.testing.assert_allclose(rev[:, ::-1], fwd, atol=1e-12)

    def test_unidirectional_is_causal(self, rng):
        blk = make_block(seed=1, bidirectional=False, relational=False)
        X, q = rng.normal(size=(4, 12, 8)), unit(rng, 8)
        base = block_forward(X, q, blk).data
        Y = X.copy()
        Y[:, 7:] += rng.normal(size=(4, 5, 8))
        moved = block_forward(Y, q, blk).data
        np.testing.assert_array_equal(moved[:, :7], base[:, :7])
        assert not np.allclose(moved[:, 7:], base[:, 7:])

    def test_unidirectional_with_static_topology_is_causal(self, rng):
        # the data-dependent adjacency pools over time; with theta = phi = 0 it is uniform
        blk = make_block(seed=1, bidirectional=False)
        blk.agcn.theta.data[...] = 0.0
        blk.agcn.phi.data[...] = 0.0
        X, q = rng.normal(size=(4, 12, 8)), unit(rng, 8)
        base = block_forward(X, q, blk).data
        Y = X.copy()
        Y[:, 9:] -= 1.0
        np.testing.assert_allclose(block_forward(Y, q, blk).data[:, :9], base[:, :9], atol=1e-15)

    def test_query_width(self, rng):
        with pytest.raises(ValueError, match="query width"):
            block_forward(rng.normal(size=(4, 3, 8)), np.ones(5), make_block())

    def test_query_changes_output(self, rng):
        blk = make_block(seed=2)
        X = rng.normal(size=(4, 6, 8))
        a = block_forward(X, unit(rng, 8), blk).data
        b = block_forward(X, unit(rng, 8), blk).data
        assert not np.allclose(a, b)


class TestAblationParameters:
    def names(self, **kw):
        return set(TmMamba(tiny(num_blocks=2, **kw)).named_parameters())

    def test_no_relational_drops_agcn(self):
        full, sub = self.names(), self.names(relational=False)
        assert not any("agcn" in n for n in sub)
        assert {n for n in full if "agcn" not in n and "W_in" not in n} >= {n for n in sub if "W_in" not in n}

    def test_unidirectional_drops_backward(self):
        full, sub = self.names(), self.names(bidirectional=False)
        assert sub < full
        assert all(("_bwd" in n) for n in full - sub)

    def test_no_text_control_adds_fusion(self):
        sub = self.names(text_control=False)
        assert any(n.startswith("W_fuse") for n in sub)
        assert not any(n.startswith("W_fuse") for n in self.names())


class TestModel:
    @pytest.mark.parametrize("L", [1, 2, 257])
    def test_length(self, rng, L):
        m = TmMamba(tiny(D=4, N=2, V=3, max_len=2000))
        out = m(rng.normal(size=(3, L, 3)), unit(rng, 4))
        assert isinstance(out, FrameScores) and out.s.shape == (L,)

    @pytest.mark.slow
    def test_length_2000(self, rng):
        m = TmMamba(tiny(D=4, N=2, V=3, max_len=2000))
        assert m(rng.normal(size=(3, 2000, 3)), unit(rng, 4)).s.shape == (2000,)

    def test_scores_are_sigmoid_of_logits(self, rng):
        out = TmMamba(tiny())(rng.normal(size=(4, 9, 3)), unit(rng, 8))
        np.testing.assert_allclose(out.s.data, 1 / (1 + np.exp(-out.logits.data)), rtol=1e-14)
        assert np.all((out.s.data > 0) & (out.s.data < 1))

    def test_zero_head_gives_half(self, rng):
        m = TmMamba(tiny())
        m.W_head2.data[...] = 0.0
        assert np.all(m(rng.normal(size=(4, 9, 3)), unit(rng, 8)).s.data == 0.5)

    def test_deterministic(self, rng):
        X, q = rng.normal(size=(4, 9, 3)), unit(rng, 8)
        a = TmMamba(tiny(), seed=5)(X, q).s.data
        b = TmMamba(tiny(), seed=5)(X, q).s.data
        assert np.array_equal(a, b)

    def test_batched_matches_unbatched(self, rng):
        m = TmMamba(tiny(), seed=1)
        X = rng.normal(size=(3, 4, 9, 3))
        Q = np.stack([unit(rng, 8) for _ in range(3)])
        both = m(X, Q).s.data
        for b in range(3):
            np.testing.assert_allclose(both[b], m(X[b], Q[b]).s.data, atol=1e-13)

    def test_errors(self, rng):
        m = TmMamba(tiny(max_len=10))
        with pytest.raises(ValueError, match="max_len"):
            m(rng.normal(size=(4, 11, 3)), unit(rng, 8))
        with pytest.raises(ValueError, match="C_in"):
            m(rng.normal(size=(4, 5, 2)), unit(rng, 8))

    def test_gradients_every_parameter(self, rng):
        m = TmMamba(tiny(), seed=2)
        X = rng.normal(size=(4, 12, 3))
        q = unit(rng, 8)
        y = (rng.random(12) < 0.4).astype(float)
        params = m.named_parameters()
        for name, p in params.items():
            # some entries are ~1e-7, where a 1e-5 step is roundoff-dominated
            err = finite_diff_check(lambda: loss_ce(m(X, q), y), [p], step=1e-3, richardson=True)
            assert err < 1e-4, name


class TestLoss:
    def test_hand_values(self):
        assert loss_ce(np.array([0.5, 0.5]), [1, 0]).data == pytest.approx(math.log(2), abs=1e-15)
        assert loss_ce(np.array([0.25]), [1]).data == pytest.approx(-math.log(0.25), abs=1e-15)

    def test_perfect_is_near_zero(self):
        assert 0 <= loss_ce(np.array([1.0, 0.0, 1.0]), [1, 0, 1]).data < 1e-6

    def test_non_negative(self, rng):
        for _ in range(50):
            s = rng.random(10)
            assert loss_ce(s, rng.integers(0, 2, 10)).data >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_ce(np.array([0.5, 0.5]), [1])


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        m = TmMamba(tiny(relational=True, bidirectional=False), seed=4)
        save_checkpoint(m, tmp_path / "ck", extra={"note": 1})
        m2 = load_checkpoint(tmp_path / "ck")
        assert m2.config == m.config
        X, q = rng.normal(size=(4, 6, 3)), unit(rng, 8)
        assert np.array_equal(m(X, q).s.data, m2(X, q).s.data)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path)

    def test_parameter_mismatch(self, tmp_path):
        import json

        save_checkpoint(TmMamba(tiny()), tmp_path / "ck")
        man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        man["parameters"] = man["parameters"][1:]
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(ValueError, match="do not match"):
            load_checkpoint(tmp_path / "ck")
