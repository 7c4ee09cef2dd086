import numpy as np
import pytest

from capgen.da import DaConfig, DeliberateDecoder, da_first_pass_distribution, da_step
from capgen.data import BOS_ID, EOS_ID, CaptionBatch, FeatureSet
from capgen.errors import ConfigError, ContractError
from capgen.tensor import Tensor
from capgen.testkit import decoder_gradcheck
from capgen.training import mle_loss


def small_da(vocab=6, hidden=3, region=3, glob=2, **kw):
    base = dict(vocab_size=vocab, hidden_dim=hidden, embed_dim=hidden,
                attn_dim=2, region_dim=region, global_dim=glob, seed=5)
    base.update(kw)
    return DeliberateDecoder(DaConfig(**base))


def da_features(rng, cfg, regions=2):
    return FeatureSet(spatial=rng.standard_normal((regions, cfg.region_dim)),
                      global_vec=rng.standard_normal(cfg.global_dim))


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax_np(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def manual_da_step(ps, cfg, v_g, regions, token, h1, m1, h2, m2):
    """Independent numpy replay of the full two-pass chain."""
    def lstm(prefix, y, hp, mp):
        gate = {}
        for g in "ifog":
            pre = ps[f"{prefix}.W_{g}"] @ y + ps[f"{prefix}.U_{g}"] @ hp + ps[f"{prefix}.b_{g}"]
            gate[g] = np.tanh(pre) if g == "g" else sigmoid_np(pre)
        mn = gate["f"] * mp + gate["i"] * gate["g"]
        return gate["o"] * np.tanh(mn), mn

    w = ps["embed.E"][token]
    y1 = np.concatenate([v_g, h2, w])
    h1n, m1n = lstm("lstm1", y1, h1, m1)
    h1t = ps["W_rd.W"] @ np.concatenate([w, h1n])
    e1 = np.array([ps["attn1.w"] @ np.tanh(ps["attn1.W_v"] @ v + ps["attn1.W_h"] @ h1t)
                   for v in regions])
    a1 = softmax_np(e1)
    v1 = a1 @ regions

    y2 = np.concatenate([v_g, h1t, v1])
    h2n, m2n = lstm("lstm2", y2, h2, m2)
    g = sigmoid_np(ps["W_x"] @ y2 + ps["W_h"] @ h2)
    s = g * np.tanh(m2n)
    e2 = np.array([ps["attn2.w"] @ np.tanh(ps["attn2.W_v"] @ v + ps["attn2.W_h"] @ h2n)
                   for v in regions])
    sent = ps["w_a"] @ np.tanh(ps["W_s"] @ s + ps["W_h3"] @ h2n)
    a2 = softmax_np(np.concatenate([e2, [sent]]))
    s_vis = ps["sentinel_proj.W"] @ s if "sentinel_proj.W" in ps else s
    v2 = a2[:-1] @ regions + a2[-1] * s_vis
    h2t = ps["W_sd.W"] @ np.concatenate([h1t, h2n, v2])
    p = softmax_np(ps["out.W"] @ h2t + ps["out.b"])
    extras = {"a2": a2, "s_vis": s_vis, "v2": v2}
    return p, extras, (h1n, m1n, h2n, m2n)


class TestDaStep:
    def test_alpha2_covers_regions_plus_sentinel(self, rng):
        dec = small_da()
        feats = da_features(rng, dec.config, regions=4)
        state = dec.init_state(feats, record_trace=True)
        p, state = dec.step(state, BOS_ID)
        alpha = state.trace[-1].alpha
        assert alpha.shape == (5,)
        assert abs(alpha.sum() - 1.0) <= 1e-9
        assert abs(p.data.sum() - 1.0) <= 1e-9

    def test_sentinel_saturation_gives_pure_language_context(self, rng):
        dec = small_da(hidden=3, region=3)
        feats = da_features(rng, dec.config)
        # push every region score to -50 so the sentinel slot takes the mass:
        # zero the feature branch, make tanh(W_h h2) saturate to +1, and weigh
        # the saturated vector by -50/attn; the sentinel score stays 0
        attn = dec.attn2.w.data.shape[0]
        dec.attn2.W_v.data[:] = 0.0
        _, probe = dec.step(dec.init_state(feats), BOS_ID)  # h2 ignores attn2 params
        h2 = probe.h2.data
        dec.attn2.W_h.data[:] = 500.0 * np.sign(h2)[None, :] / max(np.abs(h2).sum(), 1e-9)
        dec.attn2.w.data[:] = -50.0 / attn
        dec.W_s.data[:] = 0.0
        dec.W_h3.data[:] = 0.0
        state = dec.init_state(feats, record_trace=True)
        _, state = dec.step(state, BOS_ID)
        alpha = state.trace[-1].alpha
        assert alpha[-1] > 1.0 - 1e-9
        assert alpha[:-1].max() < 1e-9
        # with all the mass on the sentinel slot, the attended vector is the
        # (projected) sentinel itself
        ps = {k: v.data for k, v in dec.parameters().items()}
        _, extras, _ = manual_da_step(ps, dec.config, feats.global_vec, feats.spatial,
                                      BOS_ID, *(np.zeros(3) for _ in range(4)))
        np.testing.assert_allclose(extras["v2"], extras["s_vis"], atol=1e-12)

    def test_matches_independent_hand_evaluation(self, rng):
        dec = small_da(vocab=3, hidden=2, region=2, glob=2)
        cfg = dec.config
        feats = da_features(rng, cfg, regions=2)
        ps = {k: v.data for k, v in dec.parameters().items()}
        state = dec.init_state(feats)
        h1 = m1 = h2 = m2 = np.zeros(2)
        for token in (BOS_ID, 2, 1):
            p, state = dec.step(state, token)
            expect, _, (h1, m1, h2, m2) = manual_da_step(
                ps, cfg, feats.global_vec, feats.spatial, token, h1, m1, h2, m2)
            np.testing.assert_allclose(p.data, expect, atol=1e-9)
            np.testing.assert_allclose(state.h1.data, h1, atol=1e-9)
            np.testing.assert_allclose(state.h2.data, h2, atol=1e-9)

    def test_sentinel_projection_only_when_dims_differ(self):
        assert small_da(hidden=3, region=3).sentinel_proj is None
        assert small_da(hidden=3, region=4).sentinel_proj is not None

    def test_stage_named_error_on_region_dim_mismatch(self, rng):
        dec = small_da(region=3)
        feats = FeatureSet(spatial=rng.standard_normal((2, 5)),
                           global_vec=rng.standard_normal(dec.config.global_dim))
        state = dec.init_state(feats)
        with pytest.raises(Exception):
            dec.step(state, BOS_ID)

    def test_explicit_surface_matches_method(self, rng):
        dec = small_da()
        feats = da_features(rng, dec.config)
        state = dec.init_state(feats)
        v_g, regions = state.feats
        p_m, _ = dec.step(state, BOS_ID)
        p_f, _ = da_step(dec, state, BOS_ID, v_g, regions)
        assert np.array_equal(p_m.data, p_f.data)


class TestFirstPass:
    def test_head_disabled_is_config_error(self, rng):
        dec = small_da(first_pass_head=False)
        feats = da_features(rng, dec.config)
        state = dec.init_state(feats)
        _, state = dec.step(state, BOS_ID)
        with pytest.raises(ConfigError):
            da_first_pass_distribution(dec, state)

    def test_before_any_step_is_contract_error(self, rng):
        dec = small_da(first_pass_head=True)
        state = dec.init_state(da_features(rng, dec.config))
        with pytest.raises(ContractError):
            da_first_pass_distribution(dec, state)

    def test_valid_and_deterministic(self, rng):
        dec = small_da(first_pass_head=True)
        feats = da_features(rng, dec.config)
        _, state = dec.step(dec.init_state(feats), BOS_ID)
        p1 = da_first_pass_distribution(dec, state)
        p2 = da_first_pass_distribution(dec, state)
        assert abs(p1.data.sum() - 1.0) <= 1e-9
        assert np.array_equal(p1.data, p2.data)

    def test_draft_only_model_matches_second_pass_free_parameter_count(self):
        draft_only = small_da(first_pass_head=True, deliberate=False)
        with_second = small_da(first_pass_head=True, deliberate=True)
        draft_params = set(draft_only.parameters())
        full_params = set(with_second.parameters())
        assert draft_params < full_params
        second_pass_only = full_params - draft_params
        assert all(name.startswith(("lstm2", "attn2", "W_x", "W_h", "W_s", "W_h3",
                                    "w_a", "W_sd", "out", "sentinel_proj"))
                   for name in second_pass_only)
        # draft-only decoding runs entirely on the draft parameters
        rng = np.random.default_rng(0)
        feats = da_features(rng, draft_only.config)
        p, _ = draft_only.step(draft_only.init_state(feats), BOS_ID)
        assert abs(p.data.sum() - 1.0) <= 1e-9

    def test_disabling_deliberation_without_head_rejected(self):
        with pytest.raises(ConfigError):
            small_da(first_pass_head=False, deliberate=False)


class TestDaGradients:
    def test_full_chain_gradcheck(self):
        assert decoder_gradcheck("da", hidden=6, vocab_size=8, frames=3) < 1e-4

    def test_teacher_forced_with_aux_head(self, rng):
        dec = small_da(first_pass_head=True)
        feats = da_features(rng, dec.config)
        tokens = [BOS_ID, 4, EOS_ID]
        main, aux = dec.forward_teacher_forced(feats, tokens, with_aux=True)
        assert main.data.shape == aux.data.shape == (2, dec.config.vocab_size)
        batch = CaptionBatch.from_id_seqs([tokens])
        loss = mle_loss(main, batch) + 0.5 * mle_loss(aux, batch)
        assert np.isfinite(float(loss.data))
