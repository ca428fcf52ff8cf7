import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmae3d import numcore as nc
from ssmae3d.bench import (AttentionEncoder, EncoderSpec, SsmEncoder, attention_score_bytes,
                           count_empirical_flops, fit_quadratic, flops_attn_encoder, flops_ssm_encoder,
                           params_attn_encoder, params_ssm_encoder, patch_for_seq, patchify_2d,
                           scaling_csv, scaling_rows, ssm_cost_terms)
from ssmae3d.model import MaeConfig, MaeModel


def small(**kw):
    base = dict(dim=16, depth=2, spatial=(32, 32), patch=8, channels=1, d_state=4, heads=2)
    base.update(kw)
    return EncoderSpec(**base)


def images(spec, seed=0):
    x = np.random.default_rng(seed).normal(size=(1, spec.channels) + spec.spatial)
    return patchify_2d(x, spec.patch)


# ---- 224x224 setting ------------------------------------------------------------------

def test_flop_ratios_between_196_and_3136_tokens():
    ssm = flops_ssm_encoder(EncoderSpec.image224(4)) / flops_ssm_encoder(EncoderSpec.image224(16))
    att = flops_attn_encoder(EncoderSpec.image224(4)) / flops_attn_encoder(EncoderSpec.image224(16))
    assert 14 <= ssm <= 18
    assert att > 30


def test_parameter_counts_match_reference_rows():
    # reference values are rounded to 0.01 M
    for patch, ssm_m, att_m in [(16, 12.89, 21.67), (4, 13.75, 22.52)]:
        s = EncoderSpec.image224(patch)
        assert params_ssm_encoder(s) / 1e6 == pytest.approx(ssm_m, abs=0.011)
        assert params_attn_encoder(s) / 1e6 == pytest.approx(att_m, abs=0.011)


def test_ssm_parameters_without_position_table_do_not_depend_on_length():
    s = EncoderSpec.image224(16)
    assert params_ssm_encoder(s, 196, learned_pos=False) == params_ssm_encoder(s, 3136, learned_pos=False)
    assert params_ssm_encoder(s, 3136) - params_ssm_encoder(s, 196) == (3136 - 196) * 384


def test_tokens_and_patch_for_seq():
    assert EncoderSpec.image224(16).tokens == 196 and EncoderSpec.image224(4).tokens == 3136
    assert [patch_for_seq(t) for t in (49, 196, 784, 3136)] == [32, 16, 8, 4]
    with pytest.raises(ValueError):
        patch_for_seq(200)


# ---- analytic forms ------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 5000), patch=st.sampled_from([4, 8, 16, 32]))
def test_ssm_token_term_doubles_exactly(T, patch):
    s = EncoderSpec.image224(patch)
    c = ssm_cost_terms(s)[1]
    assert flops_ssm_encoder(s, 2 * T) - c == 2 * (flops_ssm_encoder(s, T) - c)


def test_ssm_cost_per_token_constant_across_lengths():
    s = EncoderSpec.image224(16)
    per = np.array([flops_ssm_encoder(s, T) / T for T in (49, 196, 784, 3136)])
    assert np.all(np.abs(per / per[-1] - 1) < 0.05)


def test_attention_is_quadratic():
    s = EncoderSpec.image224(16)
    T = [49, 196, 784, 3136]
    coef, r2 = fit_quadratic(T, [flops_attn_encoder(s, t) for t in T])
    assert r2 > 0.999 and coef[0] > 0
    # fixed token width isolates the length dependence; the T^2 coefficient is the score work
    assert coef[0] == pytest.approx(12 * (4 * 384 + 5 * 6), rel=1e-6)


def test_fit_quadratic_recovers_coefficients():
    T = np.array([1.0, 2.0, 5.0, 9.0])
    coef, r2 = fit_quadratic(T, 3 * T ** 2 - 2 * T + 7)
    np.testing.assert_allclose(coef, [3, -2, 7], atol=1e-9)
    assert r2 == pytest.approx(1.0)


def test_attention_score_memory():
    assert attention_score_bytes(196) == 6 * 196 * 196 * 4
    assert attention_score_bytes(3136) // attention_score_bytes(196) == 256


# ---- counted against analytic ------------------------------------------------------------------

def test_matmul_macs_counted():
    a, b = np.ones((3, 4, 5)), np.ones((5, 6))
    with nc.count_flops() as c:
        nc.tensor(a) @ nc.tensor(b)
    assert c.macs == 3 * 4 * 5 * 6 and c.flops == 2 * c.macs


@pytest.mark.parametrize("patch", [4, 8])
def test_counted_ssm_flops_match_analytic(patch):
    s = small(patch=patch)
    counted = count_empirical_flops(SsmEncoder(s), images(s)).flops
    assert abs(counted - flops_ssm_encoder(s)) <= 0.01 * flops_ssm_encoder(s)


@pytest.mark.parametrize("cls_token", [True, False])
def test_counted_attention_flops_match_analytic(cls_token):
    s = small(cls_token=cls_token)
    counted = count_empirical_flops(AttentionEncoder(s), images(s)).flops
    assert abs(counted - flops_attn_encoder(s)) <= 0.01 * flops_attn_encoder(s)


def test_counted_desk_encoder_matches_analytic():
    cfg = MaeConfig.desk()
    enc = MaeModel(cfg).encoder
    vol = np.random.default_rng(1).normal(size=(1, cfg.channels) + tuple(cfg.volume))
    with nc.no_grad(), nc.count_flops() as c:
        enc.encode_all(vol)
    analytic = flops_ssm_encoder(EncoderSpec.from_mae(cfg))
    assert abs(c.flops - analytic) <= 0.01 * analytic


def test_counted_parameters_match_analytic():
    s = small()
    assert sum(p.size for p in SsmEncoder(s).parameters()) == params_ssm_encoder(s)
    assert sum(p.size for p in AttentionEncoder(s).parameters()) == params_attn_encoder(s)


def test_counted_ratio_tracks_length():
    short, long = small(patch=8), small(patch=2)
    f = lambda s: count_empirical_flops(SsmEncoder(s), images(s)).flops  # noqa: E731
    assert 14 <= f(long) / f(short) <= 18


# ---- report ------------------------------------------------------------------

def test_scaling_rows_and_csv():
    rows = scaling_rows([196, 3136])
    assert [(r.backbone, r.seq_len) for r in rows] == [("ssm", 196), ("ssm", 3136),
                                                      ("attention", 196), ("attention", 3136)]
    assert rows[0].ratio == 1.0 and rows[0].ref_gflops == 34.46
    lines = scaling_csv(rows).splitlines()
    assert lines[0].split(",")[:3] == ["backbone", "patch", "seq_len"] and len(lines) == 5


def test_patchify_2d_layout():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    tok = patchify_2d(x, 2)
    np.testing.assert_array_equal(tok[0, 1], [2, 3, 6, 7])
    with pytest.raises(ValueError):
        patchify_2d(x, 3)
