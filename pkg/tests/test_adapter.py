import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from paadapt import adapter as A
from paadapt import nn, tensor as T
from paadapt.tensor import Tensor


class TestImageGradient:
    def test_constant_image_is_zero(self):
        img = np.full((3, 16, 16), 0.4, dtype=np.float32)
        np.testing.assert_allclose(A.image_gradient(img), 0.0)

    def test_step_edge_peaks_at_edge(self):
        img = np.zeros((3, 16, 16), dtype=np.float32)
        img[:, :, 8:] = 1.0
        out = A.image_gradient(img)[0]
        assert out[:, 7:9].min() == 1.0  # normalized peak hugs the step
        np.testing.assert_allclose(out[:, :5], 0.0)
        np.testing.assert_allclose(out[:, 12:], 0.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000))
    def test_sobel_matches_nested_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((3, 7, 7)).astype(np.float32)
        gray = img.astype(np.float64).mean(axis=0)
        ref = oracles.sobel_reference(gray)
        peak = ref.max()
        expected = ref / peak if peak > 0 else ref
        np.testing.assert_allclose(A.image_gradient(img)[0], expected, atol=1e-5)

    def test_canny_is_binary_and_finds_edge(self):
        img = np.zeros((3, 24, 24), dtype=np.float32)
        img[:, :, 12:] = 1.0
        out = A.image_gradient(img, mode="canny")[0]
        assert set(np.unique(out)).issubset({0.0, 1.0})
        assert out[:, 10:14].any()

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="edge mode"):
            A.image_gradient(np.zeros((3, 16, 16)), mode="scharr")


def _flat(rng, hw, c, grad=False):
    return Tensor(rng.normal(size=(hw, c)).astype(np.float32), requires_grad=grad)


class TestCrmVariants:
    def test_guided_gate_zero_init_is_identity(self):
        rng = np.random.default_rng(0)
        crm = A.GuidedGateCrm(rng, 8)
        guide = Tensor(rng.normal(size=(8, 2, 2)).astype(np.float32))
        x = Tensor(rng.normal(size=(8, 2, 2)).astype(np.float32))
        out = A.crm_guided_gate(crm, guide, x)
        assert np.array_equal(out.data, x.data)

    def test_guided_gate_saturated_negative_gate_vanishes(self):
        rng = np.random.default_rng(1)
        crm = A.GuidedGateCrm(rng, 4)
        crm.value.weight.data[:] = rng.normal(size=(4, 4))
        crm.gate.bias.data[:] = -50.0
        crm.gate.weight.data[:] = 0.0
        guide = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32))
        x = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32))
        out = A.crm_guided_gate(crm, guide, x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_guided_gate_gradients_reach_both_inputs(self):
        rng = np.random.default_rng(2)
        crm = A.GuidedGateCrm(rng, 4)
        crm.value.weight.data[:] = rng.normal(size=(4, 4)).astype(np.float32)
        guide = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32), requires_grad=True)
        T.tsum(A.crm_guided_gate(crm, guide, x)).backward()
        assert np.any(guide.grad) and np.any(x.grad)
        assert crm.gate.weight.grad is not None and np.any(crm.gate.weight.grad)

    def test_cross_attention_zero_value_is_identity(self):
        rng = np.random.default_rng(3)
        crm = A.CrossAttentionCrm(rng, 8)
        guide = Tensor(rng.normal(size=(8, 2, 2)).astype(np.float32))
        x = Tensor(rng.normal(size=(8, 2, 2)).astype(np.float32))
        out = A.crm_cross_attention(crm, guide, x)
        assert np.array_equal(out.data, x.data)

    def test_cross_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        attn = nn.SingleHeadAttention(rng, 4)
        q = _flat(rng, 3, 4)
        k = _flat(rng, 5, 4)
        logits = T.scale(T.matmul(attn.q_proj(q), T.transpose(attn.k_proj(k))), attn.scale)
        weights = T.softmax(logits, 1.0, axis=-1)
        np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-6)

    def test_cross_attention_matches_hand_rolled_oracle(self):
        rng = np.random.default_rng(5)
        c, h, w = 4, 2, 2
        crm = A.CrossAttentionCrm(rng, c)
        crm.attn.v_proj.weight.data[:] = rng.normal(size=(c, c)).astype(np.float32)
        guide = Tensor(rng.normal(size=(c, h, w)).astype(np.float32))
        x = Tensor(rng.normal(size=(c, h, w)).astype(np.float32))
        out = A.crm_cross_attention(crm, guide, x)

        xf = x.data.reshape(c, h * w).T.astype(np.float64)
        gf = guide.data.reshape(c, h * w).T.astype(np.float64)
        q = xf @ crm.attn.q_proj.weight.data.astype(np.float64)
        k = gf @ crm.attn.k_proj.weight.data.astype(np.float64)
        v = gf @ crm.attn.v_proj.weight.data.astype(np.float64)
        ref = xf + oracles.attention_reference(q, k, v, 1.0 / np.sqrt(c))
        np.testing.assert_allclose(out.data.reshape(c, h * w).T, ref, atol=1e-5)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        crm = A.GuidedGateCrm(rng, 4)
        with pytest.raises(T.ShapeError):
            A.crm_guided_gate(
                crm,
                Tensor(np.zeros((4, 2, 2), dtype=np.float32)),
                Tensor(np.zeros((4, 3, 3), dtype=np.float32)),
            )


class TestSparseOptimization:
    def test_zero_value_projection_is_identity(self):
        rng = np.random.default_rng(0)
        attn = nn.SingleHeadAttention(rng, 8)
        t_in = _flat(rng, 5, 8)
        x_pa = _flat(rng, 9, 8)
        out = A.optimize_sparse_prompts(attn, t_in, x_pa)
        assert np.array_equal(out.data, t_in.data)

    def test_single_token_matches_hand_computation(self):
        rng = np.random.default_rng(1)
        c = 4
        attn = nn.SingleHeadAttention(rng, c)
        attn.v_proj.weight.data[:] = rng.normal(size=(c, c)).astype(np.float32)
        t_in = _flat(rng, 1, c)
        x_pa = _flat(rng, 3, c)
        out = A.optimize_sparse_prompts(attn, t_in, x_pa)
        q = t_in.data.astype(np.float64) @ attn.q_proj.weight.data.astype(np.float64)
        k = x_pa.data.astype(np.float64) @ attn.k_proj.weight.data.astype(np.float64)
        v = x_pa.data.astype(np.float64) @ attn.v_proj.weight.data.astype(np.float64)
        ref = t_in.data + oracles.attention_reference(q, k, v, 1.0 / np.sqrt(c))
        np.testing.assert_allclose(out.data, ref, atol=1e-5)


class TestRefineUncertainTokens:
    def _setup(self, c=6):
        rng = np.random.default_rng(0)
        mlp_r = nn.Mlp(rng, 2 * c, 2 * c, c)
        mlp_u = nn.Mlp(rng, 2 * c, 2 * c, c)
        mask_tokens = Tensor(rng.normal(size=(4, c)).astype(np.float32))
        s_r = Tensor(rng.normal(size=c).astype(np.float32), requires_grad=True)
        s_u = Tensor(rng.normal(size=c).astype(np.float32), requires_grad=True)
        return mlp_r, mlp_u, mask_tokens, s_r, s_u, c

    def test_output_shapes(self):
        mlp_r, mlp_u, mask_tokens, s_r, s_u, c = self._setup()
        r, u = A.derive_refine_uncertain_tokens(mlp_r, mlp_u, mask_tokens, s_r, s_u)
        assert r.data.shape == (c,) and u.data.shape == (c,)

    def test_distinct_statics_give_distinct_outputs(self):
        mlp_r, mlp_u, mask_tokens, s_r, s_u, c = self._setup()
        r1, _ = A.derive_refine_uncertain_tokens(mlp_r, mlp_u, mask_tokens, s_r, s_u)
        r2, _ = A.derive_refine_uncertain_tokens(mlp_r, mlp_u, mask_tokens, s_u, s_u)
        assert not np.allclose(r1.data, r2.data)

    def test_gradient_reaches_static_tokens(self):
        mlp_r, mlp_u, mask_tokens, s_r, s_u, c = self._setup()
        r, u = A.derive_refine_uncertain_tokens(mlp_r, mlp_u, mask_tokens, s_r, s_u)
        T.tsum(T.add(T.tsum(T.mul(r, r)), T.tsum(T.mul(u, u)))).backward()
        assert s_r.grad is not None and np.any(s_r.grad)
        assert s_u.grad is not None and np.any(s_u.grad)


class TestMaskTriple:
    def test_composition_limits(self):
        rng = np.random.default_rng(0)
        m_c = Tensor(rng.random((4, 4)).astype(np.float32))
        m_r = Tensor(rng.random((4, 4)).astype(np.float32))
        zero = Tensor(np.zeros((4, 4), dtype=np.float32))
        one = Tensor(np.ones((4, 4), dtype=np.float32))
        np.testing.assert_allclose(A.compose_mask_triple(m_c, m_r, zero).data, m_c.data, atol=1e-6)
        np.testing.assert_allclose(A.compose_mask_triple(m_c, m_r, one).data, m_r.data, atol=1e-6)

    def test_midpoint(self):
        rng = np.random.default_rng(1)
        m_c = Tensor(rng.random((3, 3)).astype(np.float32))
        m_r = Tensor(rng.random((3, 3)).astype(np.float32))
        half = Tensor(np.full((3, 3), 0.5, dtype=np.float32))
        np.testing.assert_allclose(
            A.compose_mask_triple(m_c, m_r, half).data, (m_c.data + m_r.data) / 2, atol=1e-6
        )

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_composition_identity_and_convexity(self, seed):
        rng = np.random.default_rng(seed)
        m_c, m_r, m_u = (rng.random((3, 3)).astype(np.float32) for _ in range(3))
        m_pa = A.compose_mask_triple(Tensor(m_c), Tensor(m_r), Tensor(m_u)).data
        direct = m_u * m_r + (1 - m_u) * m_c
        assert np.abs(m_pa - direct).max() < 1e-6
        lo = np.minimum(m_c, m_r) - 1e-6
        hi = np.maximum(m_c, m_r) + 1e-6
        assert ((m_pa >= lo) & (m_pa <= hi)).all()

    def test_predict_mask_triple_values_in_open_unit_interval(self):
        rng = np.random.default_rng(2)
        c, h, w = 6, 3, 3
        feature = Tensor(rng.normal(size=(c, h, w)).astype(np.float32))
        tokens = [Tensor(rng.normal(size=c).astype(np.float32)) for _ in range(3)]
        triple = A.predict_mask_triple(feature, *tokens)
        for m in (triple.m_c, triple.m_r, triple.m_u, triple.m_pa):
            assert m.data.shape == (h, w)
            assert (m.data > 0).all() and (m.data < 1).all()


class TestAssemble:
    def _tok(self, rng, c=4):
        return Tensor(rng.normal(size=c).astype(np.float32))

    def test_zero_samples_keeps_count(self):
        rng = np.random.default_rng(0)
        t_pa = A.assemble_pa_tokens(
            self._tok(rng), self._tok(rng), [self._tok(rng)], [], [self._tok(rng)] * 2
        )
        assert len(t_pa) == 5
        assert t_pa.roles == ["iou", "refine", "point", "box", "box"]

    def test_four_samples_appended(self):
        rng = np.random.default_rng(1)
        samples = [self._tok(rng) for _ in range(4)]
        t_pa = A.assemble_pa_tokens(
            self._tok(rng), self._tok(rng), [self._tok(rng)], samples, [self._tok(rng)] * 2
        )
        assert t_pa.roles.count("sample") == 4
        assert t_pa.roles == ["iou", "refine", "point", "sample", "sample", "sample", "sample", "box", "box"]

    def test_eq7_ordering(self):
        rng = np.random.default_rng(2)
        iou, r = self._tok(rng), self._tok(rng)
        p = [self._tok(rng)]
        s = [self._tok(rng)]
        b = [self._tok(rng), self._tok(rng)]
        t_pa = A.assemble_pa_tokens(iou, r, p, s, b)
        np.testing.assert_array_equal(t_pa.mat.data[0], iou.data)
        np.testing.assert_array_equal(t_pa.mat.data[1], r.data)
        np.testing.assert_array_equal(t_pa.mat.data[2], p[0].data)
        np.testing.assert_array_equal(t_pa.mat.data[3], s[0].data)
        np.testing.assert_array_equal(t_pa.mat.data[4], b[0].data)


class TestEndToEndGradients:
    def test_loss_on_composed_mask_reaches_guide_convs(self):
        rng = np.random.default_rng(0)
        adapter = A.PromptAdapter(rng, 8)
        # wake the zero-init value path so gradients flow end to end
        adapter.crm.value.weight.data[:] = rng.normal(0, 0.1, size=(8, 8)).astype(np.float32)
        img = Tensor(rng.random((3, 32, 32)).astype(np.float32))
        guide = adapter.encode_guide(img)
        guide_flat = A._to_flat(guide)
        x = _flat(rng, 4, 8)
        x_pa = adapter.crm.apply_flat(guide_flat, x)
        token = Tensor(rng.normal(size=8).astype(np.float32))
        triple = A.predict_mask_triple(A._to_chw(x_pa, 2, 2), token, token, token)
        T.tsum(triple.m_pa).backward()
        for name, p in adapter.guide_encoder.parameters().items():
            if name.endswith("weight"):
                assert p.grad is not None and np.any(p.grad), name
