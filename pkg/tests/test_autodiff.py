import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from textssm import autodiff as ad
from textssm.autodiff import Tape, Tensor, finite_diff_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def grads_of(fn, *leaves):
    for t in leaves:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [t.grad for t in leaves]


class TestTensor:
    def test_grad_slot_present_iff_requires_grad(self):
        assert Tensor([1.0, 2.0]).grad is None
        t = Tensor([[1.0, 2.0]], requires_grad=True)
        assert t.grad.shape == t.shape
        assert np.all(t.grad == 0)

    def test_integer_input_promoted_to_double(self):
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_single_precision_selectable(self):
        t = Tensor([1.0, 2.0], dtype=np.float32)
        assert t.dtype == np.float32
        assert ad.mul(t, t).dtype == np.float32

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_forward_non_finite_is_an_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor([0.0, 1.0]))

    def test_forward_is_deterministic(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        r1 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
        r2 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
        assert np.array_equal(r1, r2)


class TestMatmul:
    def test_identity(self):
        b = np.array([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_hand_contraction(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_zero_matrix(self, rng):
        out = ad.matmul(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 2))))
        assert np.all(out.data == 0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_batch_broadcast_backward(self, rng):
        a, b = leaf(rng.normal(size=(3, 2, 4))), leaf(rng.normal(size=(4, 5)))
        ga, gb = grads_of(lambda: ad.sum_axis(ad.matmul(a, b)), a, b)
        g = np.ones((3, 2, 5))
        np.testing.assert_allclose(ga, g @ b.data.T)
        np.testing.assert_allclose(gb, np.einsum("bmk,bmn->kn", a.data, g))


class TestActivations:
    def test_softplus_at_zero_is_ln2(self):
        assert ad.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)
        # six digits as stated: 0.693147...
        assert f"{ad.softplus(Tensor(0.0)).item():.6f}" == "0.693147"

    def test_softplus_large_input_does_not_overflow(self):
        for x in (50.0, 800.0):
            v = ad.softplus(Tensor(x)).item()
            assert v == pytest.approx(x, rel=1e-15)
        # 50 + log1p(e^-50), tail ~2e-22 is below double resolution at 50
        assert ad.softplus(Tensor(50.0)).item() - 50.0 == pytest.approx(math.exp(-50), abs=1e-14)
        assert ad.softplus(Tensor(-800.0)).item() == 0.0

    @given(st.floats(-700, 700))
    def test_softplus_bound(self, x):
        assert ad.softplus(Tensor(x)).item() >= max(x, 0.0)

    def test_sigmoid_values(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5
        assert ad.sigmoid(Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)

    @given(st.floats(-700, 700))
    def test_sigmoid_symmetry(self, x):
        s = ad.sigmoid(Tensor([x, -x])).data
        assert s[0] + s[1] == pytest.approx(1.0, abs=1e-15)

    def test_sigmoid_extremes_finite(self):
        s = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert s.tolist() == [0.0, 1.0]

    def test_silu_zero(self):
        assert ad.silu(Tensor(0.0)).item() == 0.0


class TestShapeOps:
    def test_mean_over_unit_axis_is_identity(self, rng):
        x = rng.normal(size=(3, 1, 4))
        np.testing.assert_array_equal(ad.mean_axis(Tensor(x), 1).data, x[:, 0])

    def test_concat_shape_law(self):
        out = ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=-1)
        assert out.shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(ValueError):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 5)))], axis=-1)

    def test_linear_shape_error(self):
        with pytest.raises(ValueError, match="linear"):
            ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    @given(
        hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4).flatmap(
            lambda s: st.tuples(
                hnp.arrays(np.float64, s, elements=st.floats(-10, 10)),
                hnp.arrays(np.float64, s[-1:], elements=st.floats(-10, 10)),
            )
        )
    )
    def test_broadcast_add_matches_materialized(self, pair):
        a, b = pair
        direct = ad.add(Tensor(a), Tensor(b)).data
        materialized = ad.add(Tensor(a), ad.broadcast_to(Tensor(b), a.shape)).data
        assert np.array_equal(direct, materialized)

    def test_broadcast_gradient_is_summed(self, rng):
        a, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
        _, gb = grads_of(lambda: ad.sum_axis(ad.add(a, b)), a, b)
        np.testing.assert_array_equal(gb, np.full(3, 4.0))


class TestBackward:
    def test_sum_of_squares(self):
        w = leaf([1.0, 2.0])
        (g,) = grads_of(lambda: ad.sum_axis(ad.mul(w, w)), w)
        assert g.tolist() == [2.0, 4.0]

    def test_unused_leaf_gets_zero_grad(self):
        w, u = leaf([1.0, 2.0]), leaf([3.0])
        _, gu = grads_of(lambda: ad.sum_axis(ad.mul(w, w)), w, u)
        assert gu.tolist() == [0.0]

    def test_shared_leaf_accumulates(self):
        w = leaf([3.0])
        (g,) = grads_of(lambda: ad.sum_axis(ad.add(ad.mul(w, w), ad.mul(w, 2.0))), w)
        assert g.tolist() == [8.0]

    def test_repeated_backward_is_error(self):
        w = leaf([1.0])
        with Tape() as tape:
            loss = ad.sum_axis(ad.mul(w, w))
        tape.backward(loss)
        with pytest.raises(ad.TapeError, match="already"):
            tape.backward(loss)

    def test_non_scalar_loss(self):
        w = leaf([1.0, 2.0])
        with Tape() as tape:
            y = ad.mul(w, w)
        with pytest.raises(ad.TapeError, match="scalar"):
            tape.backward(y)

    def test_detached_loss(self):
        w = leaf([1.0])
        with Tape() as t1:
            loss = ad.sum_axis(ad.mul(w, w))
        with Tape() as t2:
            pass
        with pytest.raises(ad.TapeError, match="detached"):
            t2.backward(loss)
        with pytest.raises(ad.TapeError):
            Tensor([1.0]).backward()
        t1.backward(loss)

    def test_linear_sigmoid_chain_matches_fd(self, rng):
        x = Tensor(rng.normal(size=(5, 4)))
        W, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
        err = finite_diff_check(lambda: ad.sum_axis(ad.sigmoid(ad.linear(x, W, b))), [W, b], step=1e-5)
        assert err < 1e-6

    def test_tracker_released_after_backward(self, rng):
        w = leaf(rng.normal(size=(8, 8)))
        with Tape() as tape:
            loss = ad.sum_axis(ad.tanh(ad.matmul(w, w)))
        assert ad.tracker.live > 0
        tape.backward(loss)
        assert ad.tracker.live == 0
        assert ad.tracker.peak > 0

    def test_activation_cap(self):
        ad.tracker.reset(cap=10)
        w = leaf(np.ones((4, 4)))
        with pytest.raises(ad.ActivationCapExceeded):
            with Tape():
                ad.matmul(w, w)


# (name, op builder, input shapes, domain)
OPS = [
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (4,)], None),
    ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (3, 1)], None),
    ("mul", lambda a, b: ad.mul(a, b), [(2, 3), (2, 3)], None),
    ("div", lambda a, b: ad.div(a, b), [(2, 3), (2, 3)], "positive"),
    ("exp", lambda a: ad.exp(a), [(5,)], None),
    ("log", lambda a: ad.log(a), [(5,)], "positive"),
    ("sqrt", lambda a: ad.sqrt(a), [(5,)], "positive"),
    ("softplus", lambda a: ad.softplus(a), [(6,)], None),
    ("sigmoid", lambda a: ad.sigmoid(a), [(6,)], None),
    ("silu", lambda a: ad.silu(a), [(6,)], None),
    ("tanh", lambda a: ad.tanh(a), [(6,)], None),
    ("sum_axis", lambda a: ad.sum_axis(a, 1), [(3, 4)], None),
    ("mean_axis", lambda a: ad.mean_axis(a, 0), [(3, 4)], None),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), [(3, 4)], None),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], None),
    ("swapaxes", lambda a: ad.swapaxes(a, 0, 2), [(2, 3, 4)], None),
    ("flip", lambda a: ad.flip(a, 1), [(2, 5)], None),
    ("broadcast_to", lambda a: ad.broadcast_to(a, (3, 4)), [(1, 4)], None),
    ("index", lambda a: ad.index(a, (slice(None), [0, 2, 2])), [(3, 4)], None),
    ("concat", lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (1, 3)], None),
    ("matmul", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 2)], None),
    ("linear", lambda x, W, b: ad.linear(x, W, b), [(5, 3), (3, 2), (2,)], None),
    ("softmax", lambda a: ad.softmax(a, axis=-1), [(3, 5)], None),
    ("rms_norm", lambda x, s: ad.rms_norm(x, s), [(4, 6), (6,)], None),
    ("causal_conv", lambda x, w: ad.causal_depthwise_conv(x, w), [(2, 7, 3), (4, 3)], None),
]


class TestGradientFidelity:
    @pytest.mark.parametrize("name,op,shapes,domain", OPS, ids=[o[0] for o in OPS])
    def test_op_matches_finite_differences_at_20_points(self, name, op, shapes, domain):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(20):
            if domain == "positive":
                leaves = [leaf(rng.uniform(0.5, 2.0, size=s)) for s in shapes]
            else:
                leaves = [leaf(rng.normal(size=s)) for s in shapes]
            weights = None

            def f():
                out = op(*leaves)
                nonlocal weights
                if weights is None:
                    weights = rng.normal(size=out.shape)
                return ad.sum_axis(ad.mul(out, weights))

            # Richardson at h=1e-3 keeps roundoff small on tiny gradient entries
            assert finite_diff_check(f, leaves, step=1e-3, richardson=True) < 1e-6

    def test_quadratic_form_is_exact(self, rng):
        M = rng.normal(size=(4, 4))
        x = leaf(rng.normal(size=(4, 1)))
        err = finite_diff_check(lambda: ad.sum_axis(ad.mul(x, ad.matmul(Tensor(M), x))), [x])
        assert err < 1e-9

    def test_constant_function(self):
        x = leaf([1.0, 2.0])
        assert finite_diff_check(lambda: ad.sum_axis(Tensor([3.0])), [x]) == 0.0
        assert np.all(x.grad == 0)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda: ad.sum_axis(Tensor([1.0])), [], step=0.0)
