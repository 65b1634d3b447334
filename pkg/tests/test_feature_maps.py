import json
import math

import numpy as np
import pytest

from hla.errors import DimensionError, PrecisionError
from hla.feature_maps import (
    FeatureMapParams,
    RopeConfig,
    apply_rope,
    default_query_scale,
    gelu,
    gelu_grad,
    init_feature_map,
    load_weight_bundle,
    phi_backward,
    phi_forward,
    rope_backward,
    save_weight_bundle,
    scale_queries,
)

from helpers import fd_gradient, grad_compare, rel_err


def small_params(rng, *, d_in=3, d_hidden=5, d_out=4, relu=True, ln=False, dtype=np.float64):
    return init_feature_map(
        d_in, d_hidden, d_out, rng=rng, use_relu_output=relu, use_layernorm=ln, dtype=dtype
    )


class TestGelu:
    def test_matches_scalar_erf(self):
        xs = np.linspace(-4.0, 4.0, 33)
        got = gelu(xs)
        for x, g in zip(xs, got):
            expect = 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))
            assert abs(g - expect) <= 1e-15 * max(1.0, abs(expect))

    def test_grad_matches_finite_difference(self):
        xs = np.linspace(-3.0, 3.0, 25)
        h = 1e-6
        fd = (gelu(xs + h) - gelu(xs - h)) / (2 * h)
        np.testing.assert_allclose(gelu_grad(xs), fd, atol=1e-9)

    def test_fixed_points(self):
        assert gelu(np.array([0.0]))[0] == 0.0
        # gelu(x) -> x for large positive x, -> 0 for large negative x
        assert abs(gelu(np.array([8.0]))[0] - 8.0) < 1e-12
        assert abs(gelu(np.array([-8.0]))[0]) < 1e-12


class TestPhiForward:
    def test_zero_weights_relu_gives_zero(self):
        dt = np.float64
        p = FeatureMapParams(
            w1=np.zeros((3, 4), dtype=dt),
            b1=np.zeros(4, dtype=dt),
            w2=np.zeros((4, 2), dtype=dt),
            b2=np.zeros(2, dtype=dt),
            use_relu_output=True,
        )
        out = phi_forward(p, np.ones((5, 3)))
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(11)
        p = small_params(rng, relu=False)
        x = rng.standard_normal((2, 3))
        got = phi_forward(p, x)
        for r in range(2):
            for j in range(p.d_out):
                acc = 0.0
                for k in range(p.d_hidden):
                    a = sum(x[r, i] * p.w1[i, k] for i in range(p.d_in)) + p.b1[k]
                    hval = 0.5 * a * (1.0 + math.erf(a / math.sqrt(2.0)))
                    acc += hval * p.w2[k, j]
                acc += p.b2[j]
                assert abs(got[r, j] - acc) <= 1e-12

    def test_relu_output_nonnegative(self):
        rng = np.random.default_rng(12)
        p = small_params(rng, relu=True)
        x = rng.standard_normal((40, 3))
        assert np.all(phi_forward(p, x) >= 0.0)

    def test_layernorm_output_statistics(self):
        rng = np.random.default_rng(13)
        p = small_params(rng, relu=False, ln=True, d_out=6)
        x = rng.standard_normal((10, 3))
        out = phi_forward(p, x)
        # unit gamma, zero beta: rows are standardized; the variance sits
        # slightly below 1 by a factor var/(var+ln_eps)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        v = out.var(axis=-1)
        assert np.all(v <= 1.0 + 1e-12)
        assert np.all(v >= 0.99)

    def test_width_mismatch(self):
        rng = np.random.default_rng(14)
        p = small_params(rng)
        with pytest.raises(DimensionError):
            phi_forward(p, np.ones((2, p.d_in + 1)))

    def test_dtype_mismatch(self):
        rng = np.random.default_rng(15)
        p = small_params(rng, dtype=np.float64)
        with pytest.raises(PrecisionError):
            phi_forward(p, np.ones((2, 3), dtype=np.float32))

    def test_float32_supported(self):
        rng = np.random.default_rng(16)
        p = small_params(rng, dtype=np.float32)
        out = phi_forward(p, np.ones((2, 3), dtype=np.float32))
        assert out.dtype == np.float32


class TestPhiBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(17)
        p = small_params(rng)
        x = rng.standard_normal((4, 3))
        grads, gx = phi_backward(p, x, np.zeros((4, p.d_out)))
        for arr in (grads.w1, grads.b1, grads.w2, grads.b2, gx):
            np.testing.assert_array_equal(arr, np.zeros_like(arr))

    def test_saturated_identity_chain(self):
        # With w1=w2=I, no relu/ln, and inputs deep in the linear tail of
        # GELU, the map is effectively x -> x and grad_w1 -> x^T grad_out.
        d = 3
        p = FeatureMapParams(
            w1=np.eye(d),
            b1=np.zeros(d),
            w2=np.eye(d),
            b2=np.zeros(d),
            use_relu_output=False,
        )
        rng = np.random.default_rng(18)
        x = rng.uniform(8.0, 9.0, size=(5, d))
        g = rng.standard_normal((5, d))
        grads, gx = phi_backward(p, x, g)
        np.testing.assert_allclose(grads.w1, x.T @ g, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(gx, g, rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("relu,ln", [(False, False), (True, False), (False, True), (True, True)])
    def test_finite_difference_every_coordinate(self, relu, ln):
        rng = np.random.default_rng(19)
        p = small_params(rng, d_in=3, d_hidden=4, d_out=3, relu=relu, ln=ln)
        x = rng.standard_normal((2, 3))
        g = rng.standard_normal((2, 3))

        grads, gx = phi_backward(p, x, g)

        def loss():
            return float(np.sum(phi_forward(p, x) * g))

        pairs = [(grads.w1, p.w1), (grads.b1, p.b1), (grads.w2, p.w2), (grads.b2, p.b2)]
        if ln:
            pairs += [(grads.ln_gamma, p.ln_gamma), (grads.ln_beta, p.ln_beta)]
        pairs.append((gx, x))
        for analytic, arr in pairs:
            num = fd_gradient(loss, arr, h=1e-6)
            assert grad_compare(analytic, num, abs_floor=1e-7) <= 1e-6


class TestRope:
    def test_position_zero_identity(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((1, 1, 6))
        cfg = RopeConfig(head_dim=6, positions=np.array([0.0]))
        np.testing.assert_array_equal(apply_rope(x, cfg), x)

    def test_quarter_turn(self):
        # lowest-frequency pair has unit frequency, so position pi/2
        # rotates (1, 0) onto (0, 1)
        x = np.array([[1.0, 0.0]])
        cfg = RopeConfig(head_dim=2, positions=np.array([np.pi / 2]))
        out = apply_rope(x, cfg)
        np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-15)

    def test_norm_preserved_per_pair(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((2, 3, 7, 8))
        out = apply_rope(x, RopeConfig(head_dim=8))
        before = x[..., 0::2] ** 2 + x[..., 1::2] ** 2
        after = out[..., 0::2] ** 2 + out[..., 1::2] ** 2
        np.testing.assert_allclose(after, before, rtol=1e-12, atol=1e-12)

    def test_backward_inverts_forward(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((2, 9, 4))
        cfg = RopeConfig(head_dim=4)
        np.testing.assert_allclose(rope_backward(apply_rope(x, cfg), cfg), x,
                                   rtol=1e-12, atol=1e-12)

    def test_backward_is_adjoint(self):
        rng = np.random.default_rng(23)
        cfg = RopeConfig(head_dim=6)
        x = rng.standard_normal((3, 5, 6))
        y = rng.standard_normal((3, 5, 6))
        lhs = float(np.sum(apply_rope(x, cfg) * y))
        rhs = float(np.sum(x * rope_backward(y, cfg)))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_relative_phase(self):
        # rotating by positions p and then querying at p gives angles that
        # depend only on the offset; check via dot products of a shifted pair
        cfg_a = RopeConfig(head_dim=2, positions=np.array([3.0, 7.0]))
        cfg_b = RopeConfig(head_dim=2, positions=np.array([13.0, 17.0]))
        v = np.array([[0.6, -0.8], [0.3, 1.1]])
        ra = apply_rope(v, cfg_a)
        rb = apply_rope(v, cfg_b)
        assert abs(float(ra[0] @ ra[1]) - float(rb[0] @ rb[1])) <= 1e-12

    def test_odd_head_dim_rejected(self):
        with pytest.raises(DimensionError):
            RopeConfig(head_dim=5)

    def test_base_at_most_one_rejected(self):
        with pytest.raises(ValueError):
            RopeConfig(head_dim=4, base=1.0)

    def test_positions_shape_checked(self):
        cfg = RopeConfig(head_dim=2, positions=np.array([0.0, 1.0]))
        with pytest.raises(DimensionError):
            apply_rope(np.ones((3, 2)), cfg)


class TestQueryScale:
    def test_default_pin_for_head_dim_128(self):
        assert math.isclose(default_query_scale(128), 2.0 ** -3.5, rel_tol=1e-15)

    def test_unit_scale_identity(self):
        rng = np.random.default_rng(24)
        q = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(scale_queries(q, 1.0), q)

    def test_halving(self):
        q = np.full((2, 2), 6.0)
        np.testing.assert_array_equal(scale_queries(q, 0.5), np.full((2, 2), 3.0))

    def test_default_matches_explicit(self):
        rng = np.random.default_rng(25)
        q = rng.standard_normal((2, 5, 16))
        np.testing.assert_array_equal(scale_queries(q), scale_queries(q, 0.25))

    @pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_scale_rejected(self, bad):
        with pytest.raises(ValueError):
            scale_queries(np.ones((1, 4)), bad)


class TestInitAndValidation:
    def test_init_bounds_and_zero_biases(self):
        rng = np.random.default_rng(26)
        p = init_feature_map(16, 32, 8, rng=rng)
        assert np.all(np.abs(p.w1) <= 1.0 / 4.0)
        assert np.all(np.abs(p.w2) <= 1.0 / np.sqrt(32))
        np.testing.assert_array_equal(p.b1, np.zeros(32))
        np.testing.assert_array_equal(p.b2, np.zeros(8))

    def test_layernorm_init(self):
        rng = np.random.default_rng(27)
        p = init_feature_map(4, 4, 4, rng=rng, use_layernorm=True)
        np.testing.assert_array_equal(p.ln_gamma, np.ones(4))
        np.testing.assert_array_equal(p.ln_beta, np.zeros(4))

    def test_missing_ln_arrays_rejected(self):
        with pytest.raises(DimensionError):
            FeatureMapParams(
                w1=np.zeros((2, 2)), b1=np.zeros(2), w2=np.zeros((2, 2)),
                b2=np.zeros(2), use_layernorm=True,
            )

    def test_stray_ln_arrays_rejected(self):
        with pytest.raises(DimensionError):
            FeatureMapParams(
                w1=np.zeros((2, 2)), b1=np.zeros(2), w2=np.zeros((2, 2)),
                b2=np.zeros(2), use_layernorm=False, ln_gamma=np.ones(2),
                ln_beta=np.zeros(2),
            )

    def test_bias_shape_rejected(self):
        with pytest.raises(DimensionError):
            FeatureMapParams(
                w1=np.zeros((2, 3)), b1=np.zeros(2), w2=np.zeros((3, 2)),
                b2=np.zeros(2),
            )

    def test_layer_width_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            FeatureMapParams(
                w1=np.zeros((2, 3)), b1=np.zeros(3), w2=np.zeros((4, 2)),
                b2=np.zeros(2),
            )

    def test_nonpositive_ln_eps_rejected(self):
        with pytest.raises(ValueError):
            FeatureMapParams(
                w1=np.zeros((2, 2)), b1=np.zeros(2), w2=np.zeros((2, 2)),
                b2=np.zeros(2), use_layernorm=True, ln_gamma=np.ones(2),
                ln_beta=np.zeros(2), ln_eps=0.0,
            )


class TestWeightBundle:
    def test_round_trip_preserves_outputs(self, tmp_path):
        rng = np.random.default_rng(28)
        maps = {
            "kernel_q": small_params(rng, relu=True, ln=False),
            "value_a": small_params(rng, relu=False, ln=True),
        }
        save_weight_bundle(tmp_path / "bundle", maps)
        back = load_weight_bundle(tmp_path / "bundle")
        assert set(back) == set(maps)
        x = rng.standard_normal((4, 3))
        for name in maps:
            np.testing.assert_array_equal(
                phi_forward(back[name], x), phi_forward(maps[name], x)
            )
            assert back[name].use_relu_output == maps[name].use_relu_output
            assert back[name].use_layernorm == maps[name].use_layernorm

    def test_manifest_format(self, tmp_path):
        rng = np.random.default_rng(29)
        save_weight_bundle(tmp_path / "b", {"m": small_params(rng)})
        manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert manifest["format"] == 1
        assert manifest["maps"]["m"]["arrays"]["w1"] == "m.w1.bin"
        assert (tmp_path / "b" / "m.w1.bin").exists()

    def test_unknown_format_rejected(self, tmp_path):
        rng = np.random.default_rng(30)
        save_weight_bundle(tmp_path / "b", {"m": small_params(rng)})
        mpath = tmp_path / "b" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["format"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(ValueError):
            load_weight_bundle(tmp_path / "b")
