import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmae3d import numcore as nc
from ssmae3d.numcore import gradcheck
from ssmae3d.vim import VimBlock, VimConfig, VimStack, stack_forward, vim_block_forward


def block(D=8, seed=0, **kw):
    return VimBlock(VimConfig(D, d_state=4, **kw), np.random.default_rng(seed))


def swapped(b: VimBlock) -> VimBlock:
    s = copy.deepcopy(b)
    s.fwd, s.bwd = s.bwd, s.fwd
    return s


def test_single_token_shape():
    x = np.random.default_rng(0).normal(size=(3, 1, 8))
    assert vim_block_forward(block(), x).shape == (3, 1, 8)


def test_zero_out_proj_is_identity():
    b = VimBlock(VimConfig(8, d_state=4), np.random.default_rng(1), zero_out=True)
    x = np.random.default_rng(2).normal(size=(2, 5, 8))
    np.testing.assert_array_equal(b(nc.tensor(x)).data, x)


def test_branches_have_independent_parameters():
    b = block()
    assert not np.array_equal(b.fwd.conv_w.data, b.bwd.conv_w.data)
    assert b.fwd.ssm.x_proj is not b.bwd.ssm.x_proj


@settings(max_examples=20, deadline=None)
@given(T=st.integers(1, 12), D=st.sampled_from([4, 8]), seed=st.integers(0, 2**31))
def test_reversal_equivariance(T, D, seed):
    b = block(D, seed % 1000)
    x = np.random.default_rng(seed).normal(size=(2, T, D))
    lhs = swapped(b)(nc.tensor(x[:, ::-1])).data
    rhs = b(nc.tensor(x)).data[:, ::-1]
    assert lhs.shape == (2, T, D)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_stack_reversal_equivariance():
    st_ = VimStack(VimConfig(8, d_state=4), 3, np.random.default_rng(3))
    sw = copy.deepcopy(st_)
    sw.blocks = [swapped(b) for b in st_.blocks]
    x = np.random.default_rng(4).normal(size=(1, 9, 8))
    np.testing.assert_allclose(sw(nc.tensor(x[:, ::-1])).data, st_(nc.tensor(x)).data[:, ::-1], atol=1e-10)


def test_order_sensitive():
    b = block()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 10, 8))
    perm = rng.permutation(10)
    while np.array_equal(perm, np.arange(10)):
        perm = rng.permutation(10)
    assert not np.allclose(b(nc.tensor(x[:, perm])).data, b(nc.tensor(x)).data[:, perm], atol=1e-6)


def test_empty_stack_is_final_norm():
    x = np.random.default_rng(6).normal(size=(2, 4, 8))
    w = np.random.default_rng(7).normal(size=8)
    np.testing.assert_array_equal(stack_forward([], x, w).data, nc.rms_norm(x, w).data)


def test_stack_is_composition():
    s = VimStack(VimConfig(8, d_state=4), 2, np.random.default_rng(8))
    x = nc.tensor(np.random.default_rng(9).normal(size=(2, 6, 8)))
    manual = nc.rms_norm(vim_block_forward(s.blocks[1], vim_block_forward(s.blocks[0], x)), s.norm_w)
    np.testing.assert_array_equal(s(x).data, manual.data)


def test_stack_rejects_mixed_widths():
    with pytest.raises(nc.ShapeError):
        stack_forward([block(8), block(4)], np.ones((1, 3, 8)))


@pytest.mark.parametrize("method", ["sequential", "blelloch"])
def test_stack_gradcheck(method):
    s = VimStack(VimConfig(8, d_state=4, scan_method=method), 2, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    # steps near the default init (~1e-3) leave dA_log at round-off level
    for name, prm in s.named_parameters():
        if name.endswith("dt_b"):
            prm.data[:] = np.log(np.expm1(rng.uniform(0.2, 1.0, prm.shape)))
    x = nc.parameter(rng.normal(size=(1, 10, 8)))
    w = rng.normal(size=(1, 10, 8))
    assert gradcheck(lambda: nc.sum(s(x) * w), [x] + s.parameters(), max_entries=6) < 1e-4
