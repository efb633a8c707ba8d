import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gcasunet.blocks import (
    GAFU, GCAM, GEFS, gafu_forward, gcam_forward, gcam_permutation_check, gefs_forward, permutation_check,
)
from gcasunet.swin import TokenGrid

import oracles


def grid(seed, b, n, c, side=None):
    g = torch.Generator().manual_seed(seed)
    h, w = (side, side) if side else (1, n)
    return TokenGrid(torch.rand(b, n, c, generator=g, dtype=torch.float64) * 2 - 1, h, w)


def randomized(module, seed=0, std=0.5):
    torch.manual_seed(seed)
    module = module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.normal_(0.0, std)
    return module


def as64(x):
    return np.asarray(x, dtype=np.float64)


@pytest.mark.parametrize("mode", ["rescaled", "literal"])
def test_gcam_matches_straight_line(mode):
    block = randomized(GCAM(6, mask_scale=mode), seed=1)
    x = grid(0, 1, 3, 6)
    out, inter = gcam_forward(x, block)
    ref_out, ref_c, ref_s, ref_m = oracles.gcam(x.data[0].numpy(), oracles.weights(block), mode == "rescaled")
    for got, ref in ((out.data[0], ref_out), (inter.scores[0], ref_c), (inter.similarity[0], ref_s), (inter.mask[0], ref_m)):
        assert np.max(np.abs(got.detach().numpy() - as64(ref))) < 1e-10


def test_gcam_modes_differ():
    x = grid(1, 1, 4, 6)
    a = randomized(GCAM(6, mask_scale="rescaled"), seed=2)(x).data
    b = randomized(GCAM(6, mask_scale="literal"), seed=2)(x).data
    assert not torch.allclose(a, b)
    with pytest.raises(ValueError):
        GCAM(6, mask_scale="other")


def test_gcam_single_token():
    block = randomized(GCAM(4), seed=3)
    _, inter = gcam_forward(grid(2, 1, 1, 4), block)
    assert inter.similarity.tolist() == [[[1.0]]] and inter.mask.tolist() == [[[1.0]]]


def test_gcam_identical_tokens():
    block = randomized(GCAM(4), seed=4)
    x = TokenGrid(torch.tensor([[[0.2, -0.5, 0.9, 0.1]] * 2], dtype=torch.float64), 1, 2)
    _, inter = gcam_forward(x, block)
    assert torch.allclose(inter.similarity[0], torch.full((2, 2), 0.5, dtype=torch.float64), atol=1e-15)
    assert torch.allclose(inter.mask[0, :, 0], torch.full((2,), 0.5, dtype=torch.float64), atol=1e-15)


def test_gcam_permutation_cases():
    block = randomized(GCAM(8), seed=5)
    x = grid(3, 1, 8, 8)
    assert gcam_permutation_check(x, list(range(8)), block)
    assert gcam_permutation_check(x, [1, 0, 2, 3, 4, 5, 6, 7], block)
    assert gcam_permutation_check(x, list(range(7, -1, -1)), block)
    with pytest.raises(ValueError):
        gcam_permutation_check(x, [0, 0, 1, 2, 3, 4, 5, 6], block)


def test_permutation_check_detects_position_dependence():
    class Positional(torch.nn.Module):
        def forward(self, t):
            return t.with_data(t.data * torch.arange(t.num_tokens, dtype=t.data.dtype)[None, :, None])

    assert not permutation_check(grid(4, 1, 4, 2), [1, 0, 2, 3], Positional())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
def test_gcam_normalization_property(n, seed, scale):
    block = randomized(GCAM(4), seed=seed % 1000)
    x = grid(seed, 2, n, 4)
    _, inter = gcam_forward(x.with_data(x.data * scale), block)
    # strictly positive in exact arithmetic; large logits may underflow to 0.0
    for t in (inter.similarity, inter.mask):
        assert torch.all(t >= 0) and torch.all(t <= 1)
    assert torch.max(torch.abs(inter.similarity.sum(-1) - 1)) < 1e-6
    assert torch.max(torch.abs(inter.mask.sum(1) - 1)) < 1e-6


def test_gefs_matches_straight_line():
    block = randomized(GEFS(8, 2), seed=6)
    x = grid(5, 1, 4, 8)
    ref = oracles.gefs(x.data[0].numpy(), oracles.weights(block), 2)
    assert np.max(np.abs(gefs_forward(x, block).data[0].detach().numpy() - as64(ref))) < 1e-10


def test_gefs_zero_value_path_is_identity():
    block = randomized(GEFS(8, 2), seed=7)
    with torch.no_grad():
        for attn in (block.attn1, block.attn2):
            attn.qkv.weight[16:].zero_()
            attn.qkv.bias[16:].zero_()
            attn.proj.bias.zero_()
    x = grid(6, 2, 4, 8)
    assert torch.equal(block(x).data, x.data)


def test_gefs_single_token_single_channel():
    block = randomized(GEFS(1, 1), seed=8)
    x = TokenGrid(torch.tensor([[[0.7]]], dtype=torch.float64), 1, 1)
    assert block.gate(x).item() == 1.0
    expected = x.data + block.attn2(block.attn1(x.data))
    assert torch.equal(block(x).data, expected)


def test_gefs_attention_blocks_are_independent():
    block = GEFS(8, 2)
    assert block.attn1.qkv.weight.data_ptr() != block.attn2.qkv.weight.data_ptr()
    assert not torch.equal(block.attn1.qkv.weight, block.attn2.qkv.weight)


def test_gefs_permutation_equivariant():
    block = randomized(GEFS(8, 2), seed=9)
    x = grid(7, 1, 9, 8, side=3)
    perm = np.random.default_rng(0).permutation(9)
    assert permutation_check(x, perm, block)


@pytest.mark.parametrize("gated", [True, False])
def test_gafu_matches_straight_line(gated):
    block = randomized(GAFU(8, gated=gated), seed=10)
    skip, dec = grid(8, 1, 4, 8), grid(9, 1, 4, 8)
    ref = oracles.gafu(skip.data[0].numpy(), dec.data[0].numpy(), oracles.weights(block), gated)
    assert np.max(np.abs(gafu_forward(skip, dec, block).data[0].detach().numpy() - as64(ref))) < 1e-10


def test_gafu_identity_projection_returns_decoder():
    block = randomized(GAFU(4), seed=11)
    with torch.no_grad():
        block.fuse.weight.copy_(torch.cat([torch.eye(4), torch.zeros(4, 4)], dim=1))
        block.fuse.bias.zero_()
    skip, dec = grid(10, 2, 4, 4), grid(11, 2, 4, 4)
    assert torch.equal(block(skip, dec).data, dec.data)


def test_gafu_single_channel_doubles_skip():
    block = randomized(GAFU(1), seed=12)
    with torch.no_grad():
        block.fuse.weight.copy_(torch.tensor([[0.0, 1.0]]))
        block.fuse.bias.zero_()
    skip, dec = grid(12, 1, 3, 1), grid(13, 1, 3, 1)
    assert torch.all(block.gate(skip) == 1.0)
    assert torch.equal(block(skip, dec).data, 2 * skip.data)


def test_gafu_spatial_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        GAFU(4)(TokenGrid(torch.rand(1, 4, 4), 2, 2), TokenGrid(torch.rand(1, 16, 4), 4, 4))


def test_blocks_preserve_shape():
    x = grid(14, 2, 16, 8, side=4)
    assert GCAM(8).double()(x).data.shape == x.data.shape
    assert GEFS(8, 4).double()(x).data.shape == x.data.shape
    assert GAFU(8).double()(x, x).data.shape == x.data.shape


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_gate_weights_sum_to_one(n, c, seed):
    x = grid(seed, 2, n, c)
    for w in (randomized(GEFS(c, 1), seed % 97).gate(x), randomized(GAFU(c), seed % 89).gate(x)):
        assert torch.all(w >= 0) and torch.max(torch.abs(w.sum(-1) - 1)) < 1e-6
