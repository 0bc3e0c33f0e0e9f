import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnsplus import tensor as T
from pnsplus.gradcheck import analytic_grad, finite_diff_grad, max_rel_error
from pnsplus.ns_block import (
    ConfigError,
    NsConfig,
    NsWeights,
    brute_force_oracle,
    ns_affinities,
    ns_forward,
    sample_neighborhood,
    split_channels,
)
from pnsplus.tensor import Parameter, ShapeError, Tensor


def make(cfg, tq, tk, h, w, seed=0):
    rng = np.random.default_rng(seed)
    weights = NsWeights(rng, cfg)
    for _, p in weights.named_parameters():
        p.data += 0.1 * rng.normal(size=p.shape)  # move the affine off its identity init
    c = cfg.channels
    q = Tensor(rng.normal(size=(tq, h, w, c)))
    k = Tensor(rng.normal(size=(tk, h, w, c)))
    v = Tensor(rng.normal(size=(tk, h, w, c)))
    return q, k, v, weights


def test_config_validation():
    with pytest.raises(ConfigError):
        NsConfig(channels=6, groups=4, dilations=(1, 1, 1, 1))
    with pytest.raises(ConfigError):
        NsConfig(channels=8, groups=2, dilations=(1,))
    with pytest.raises(ConfigError):
        NsConfig(channels=8, groups=2, dilations=(1, 0))
    with pytest.raises(ConfigError):
        NsConfig(channels=8, groups=2, dilations=(1, 1), norm_axis="spatial")
    cfg = NsConfig(channels=8, groups=2, kernel=2, dilations=(1, 2))
    assert cfg.group_channels == 4 and cfg.window == 25 and cfg.slots(3) == 75


def test_split_channels_is_contiguous():
    x = Tensor(np.arange(24.0).reshape(1, 1, 3, 8))
    parts = split_channels(x, 4)
    assert [p.shape for p in parts] == [(1, 1, 3, 2)] * 4
    np.testing.assert_array_equal(parts[2].data[0, 0, 0], [4.0, 5.0])
    with pytest.raises(ShapeError):
        split_channels(x, 3)


def test_sample_neighborhood_slot_order_and_padding():
    # value encodes (t, row, col) so every slot can be checked by hand
    tk, h, w = 2, 5, 6
    grid = np.zeros((tk, h, w, 1))
    for t in range(tk):
        grid[t, :, :, 0] = 100 * t + 10 * np.arange(h)[:, None] + np.arange(w)[None, :]
    nb = sample_neighborhood(Tensor(grid), kernel=1, dilation=2)
    assert nb.values.shape == (h, w, tk * 9, 1)
    x, y = 2, 1
    s = 0
    for t in range(tk):
        for j in (-1, 0, 1):
            for l in (-1, 0, 1):
                r, c = x + 2 * j, y + 2 * l
                inside = 0 <= r < h and 0 <= c < w
                assert nb.valid[x, y, s] == inside
                expect = 100 * t + 10 * r + c if inside else 0.0
                assert nb.values.data[x, y, s, 0] == expect
                s += 1


def test_kernel_zero_attends_to_same_position_only():
    cfg = NsConfig(channels=4, groups=2, kernel=0, dilations=(1, 1), use_soft_attention=False)
    q, k, v, wts = make(cfg, 1, 1, 3, 4)
    affs = ns_affinities(q, k, cfg, wts)
    for a in affs:
        np.testing.assert_array_equal(a.values.data, 1.0)


def test_masked_slots_have_zero_probability():
    cfg = NsConfig(channels=4, groups=2, kernel=2, dilations=(3, 1))
    q, k, _, wts = make(cfg, 2, 2, 4, 5)
    for a in ns_affinities(q, k, cfg, wts):
        probs = a.values.data
        assert np.all(probs[np.broadcast_to(~a.valid[:, :, None, :], probs.shape)] == 0.0)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
        assert a.as_matrix().shape == (2 * 4 * 5, 2 * 25)


@pytest.mark.parametrize("soft,norm,axis", [(True, True, "channel"), (False, True, "temporal"), (True, False, "channel")])
def test_forward_matches_oracle_across_switches(soft, norm, axis):
    cfg = NsConfig(channels=8, groups=2, kernel=1, dilations=(1, 2), use_soft_attention=soft,
                   use_normalization=norm, norm_axis=axis)
    q, k, v, wts = make(cfg, 3, 2, 5, 6, seed=3)
    np.testing.assert_allclose(ns_forward(q, k, v, cfg, wts).data, brute_force_oracle(q, k, v, cfg, wts), atol=1e-10)


def test_soft_attention_bounds_output():
    # soft map is a max of probabilities, so it can only shrink the aggregated signal
    cfg_on = NsConfig(channels=4, groups=2, kernel=1, dilations=(1, 1))
    cfg_off = NsConfig(channels=4, groups=2, kernel=1, dilations=(1, 1), use_soft_attention=False)
    q, k, v, wts = make(cfg_on, 1, 2, 4, 4)
    on = ns_forward(q, k, v, cfg_on, wts).data
    off = ns_forward(q, k, v, cfg_off, wts).data
    assert np.all(np.abs(on) <= np.abs(off) + 1e-15)


def test_shape_errors():
    cfg = NsConfig(channels=4, groups=2, kernel=1, dilations=(1, 1))
    q, k, v, wts = make(cfg, 1, 2, 4, 4)
    with pytest.raises(ShapeError):
        ns_forward(Tensor(np.ones((1, 4, 4, 3))), k, v, cfg, wts)
    with pytest.raises(ShapeError):
        ns_forward(q, k, Tensor(np.ones((3, 4, 4, 4))), cfg, wts)
    with pytest.raises(ShapeError):
        ns_forward(Tensor(np.ones((1, 5, 4, 4))), k, v, cfg, wts)


def test_gradients_of_inputs_and_parameters():
    cfg = NsConfig(channels=4, groups=2, kernel=1, dilations=(1, 2))
    q, k, v, wts = make(cfg, 2, 2, 3, 4, seed=5)
    r = Tensor(np.random.default_rng(9).normal(size=(2, 3, 4, 4)) / 96.0)
    q, k, v = (Parameter(t.data) for t in (q, k, v))

    def loss(_):
        return T.sum(ns_forward(q, k, v, cfg, wts) * r)

    for t in [q, k, v] + wts.parameters():
        a = analytic_grad(loss, t)
        for p in [q, k, v] + wts.parameters():
            p.grad = None
        assert max_rel_error(a, finite_diff_grad(loss, t)) <= 1e-4


@given(st.integers(2, 5), st.integers(2, 5), st.sampled_from([1, 2]), st.integers(0, 2), st.integers(1, 3),
       st.integers(0, 10_000))
def test_rows_stochastic_property(h, w, groups, kernel, dil, seed):
    cfg = NsConfig(channels=2 * groups, groups=groups, kernel=kernel, dilations=(dil,) * groups)
    q, k, _, wts = make(cfg, 1, 2, h, w, seed)
    for a in ns_affinities(q, k, cfg, wts):
        m = a.as_matrix()
        assert np.all(m >= 0.0)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)


def test_forward_is_deterministic():
    cfg = NsConfig(channels=8, groups=4, kernel=1, dilations=(1, 2, 1, 2))
    q, k, v, wts = make(cfg, 1, 3, 4, 5)
    a = ns_forward(q, k, v, cfg, wts).data
    b = ns_forward(q, k, v, cfg, wts).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("soft", [True, False])
def test_group_order_permutation_leaves_output_unchanged(soft):
    cfg = NsConfig(channels=6, groups=3, kernel=1, dilations=(1, 2, 3), use_soft_attention=soft)
    q, k, v, wts = make(cfg, 1, 2, 5, 5, seed=8)
    perm = [2, 0, 1]
    cperm = np.concatenate([np.arange(2 * g, 2 * g + 2) for g in perm])
    pcfg = NsConfig(channels=6, groups=3, kernel=1, dilations=tuple(cfg.dilations[g] for g in perm),
                    use_soft_attention=soft)
    pw = NsWeights(np.random.default_rng(0), pcfg)
    for name in ("theta", "phi", "g"):
        getattr(pw, f"{name}_w").data[...] = getattr(wts, f"{name}_w").data[:, cperm]
        getattr(pw, f"{name}_b").data[...] = getattr(wts, f"{name}_b").data[cperm]
    pw.norm_gamma.data[...] = wts.norm_gamma.data[perm]
    pw.norm_beta.data[...] = wts.norm_beta.data[perm]
    pw.w_t.data[...] = wts.w_t.data[cperm]
    np.testing.assert_allclose(ns_forward(q, k, v, pcfg, pw).data, ns_forward(q, k, v, cfg, wts).data, atol=1e-12)
    a = [x.values.data for x in ns_affinities(q, k, cfg, wts)]
    b = [x.values.data for x in ns_affinities(q, k, pcfg, pw)]
    assert all(np.array_equal(a[g], b[i]) for i, g in enumerate(perm))
