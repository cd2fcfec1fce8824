"""
Wiring tests: every block rebuilt from primitive ops must match the block
bit for bit, and stage widths must chain for any valid configuration.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brain.blocks import build_cbs, build_elan, build_mpcm, cbs_forward, elan_forward, mpcm_forward
from brain.config import ModelConfig, Variant
from brain.dcl import build_dcb, build_dcl, dcb_forward, dcl_forward
from brain.mab import build_mab, build_mirb, mab_forward, mirb_forward, window_msa
from brain.model import build_model, dtnet_forward
from brain.tvconv import build_cb, cb_forward, tvconv_forward
from tensor import Mode, Tensor
from tensor import ops


# ==================== PRIMITIVE REBUILDS ====================

def conv_by_hand(x, c):
    return ops.conv2d(x, c.weight, c.bias, stride=c.stride, pad=c.pad, groups=c.groups)


def norm_by_hand(x, n, mode):
    return ops.normalize(x, n.kind, n.scale, n.shift, eps=n.eps, mode=mode,
                         running_mean=n.running_mean, running_var=n.running_var, momentum=n.momentum)


def cbs_by_hand(x, p, mode):
    return ops.silu(norm_by_hand(conv_by_hand(x, p.conv), p.bn, mode))


def elan_by_hand(x, p, mode):
    left = cbs_by_hand(x, p.entry1, mode)
    right = cbs_by_hand(x, p.entry2, mode)
    outputs, y = [left, right], right
    for first, second in zip(p.chain[::2], p.chain[1::2]):
        y = cbs_by_hand(cbs_by_hand(y, first, mode), second, mode)
        outputs.append(y)
    return cbs_by_hand(ops.concat(outputs, axis=1), p.fuse, mode)


def mpcm_by_hand(x, p, mode):
    pooled = cbs_by_hand(ops.max_pool2d(x, 2, 2), p.pool_cbs, mode)
    strided = cbs_by_hand(cbs_by_hand(x, p.conv_cbs1, mode), p.conv_cbs2, mode)
    return ops.concat([pooled, strided], axis=1)


def dcl_by_hand(x, p):
    n, c = x.dims[:2]
    spatial = conv_by_hand(x, p.sce_conv)
    column = ops.reshape(ops.global_avg_pool(x), (n, 1, c, 1))
    channel = ops.reshape(conv_by_hand(column, p.cce_conv), (n, c, 1, 1))
    weights = conv_by_hand(ops.add(spatial, channel), p.fuse_conv)
    if p.gate:
        weights = ops.sigmoid(weights)
    return ops.mul(weights, x)


def dcb_by_hand(x, p, mode):
    t = cbs_by_hand(cbs_by_hand(x, p.cbs1, mode), p.cbs2, mode)
    t = dcl_by_hand(t, p.dcl) if p.dcl is not None else conv_by_hand(t, p.static_conv)
    return ops.silu(norm_by_hand(t, p.dbs_bn, mode))


def mab_by_hand(x, p):
    z = norm_by_hand(x, p.ln1, Mode.INFER)
    gate = ops.sigmoid(conv_by_hand(ops.relu(conv_by_hand(ops.global_avg_pool(z), p.cab.squeeze)), p.cab.excite))
    y = ops.add(ops.add(x, ops.mul(ops.mul(gate, z), p.alpha)), window_msa(z, p.wmsa))
    hidden = ops.silu(conv_by_hand(norm_by_hand(y, p.ln2, Mode.INFER), p.mlp.fc1))
    return ops.add(y, conv_by_hand(hidden, p.mlp.fc2))


def mirb_by_hand(x, p, mode):
    y = elan_by_hand(cbs_by_hand(x, p.cbs, mode), p.elan, mode)
    for block in p.mabs:
        y = mab_by_hand(y, block)
    return y


def cb_by_hand(x, p, mode):
    y = x
    for mpcm, elan in zip(p.mpcms, p.elans):
        y = elan_by_hand(mpcm_by_hand(y, mpcm, mode), elan, mode)
    return tvconv_forward(y, p.tv, resize=True) if p.tv is not None else conv_by_hand(y, p.depthwise)


# ==================== BLOCKS ====================

class TestBlocksFromPrimitives:

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFER])
    @pytest.mark.parametrize("kernel,stride", [(1, 1), (3, 1), (3, 2)])
    def test_cbs(self, rng, mode, kernel, stride):
        p = build_cbs(rng, 3, 6, kernel, stride=stride)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        np.testing.assert_array_equal(cbs_forward(x, p, mode).data, cbs_by_hand(x, p, mode).data)

    @pytest.mark.parametrize("pairs", [1, 2, 3])
    def test_elan(self, rng, pairs):
        p = build_elan(rng, 6, 10, pairs=pairs)
        x = Tensor(rng.standard_normal((2, 6, 5, 5)))
        assert len(p.chain) == 2 * pairs
        np.testing.assert_array_equal(elan_forward(x, p).data, elan_by_hand(x, p, Mode.TRAIN).data)

    @pytest.mark.parametrize("branch", [0, 3])
    def test_mpcm(self, rng, branch):
        p = build_mpcm(rng, 4, branch=branch)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)))
        out = mpcm_forward(x, p)
        assert out.dims == (2, p.out_channels, 3, 3)
        np.testing.assert_array_equal(out.data, mpcm_by_hand(x, p, Mode.TRAIN).data)

    @pytest.mark.parametrize("gate", [False, True])
    def test_dcl(self, rng, gate):
        p = build_dcl(rng, 5, gate=gate)
        x = Tensor(rng.standard_normal((2, 5, 4, 6)))
        np.testing.assert_array_equal(dcl_forward(x, p).data, dcl_by_hand(x, p).data)

    @pytest.mark.parametrize("use_dcl", [True, False])
    def test_dcb(self, rng, use_dcl):
        p = build_dcb(rng, 6, use_dcl=use_dcl)
        x = Tensor(rng.uniform(size=(2, 3, 8, 8)))
        np.testing.assert_array_equal(dcb_forward(x, p).data, dcb_by_hand(x, p, Mode.TRAIN).data)

    def test_mab(self, rng):
        p = build_mab(rng, 8, heads=2, window=4, alpha=0.3, reduction=2, rel_pos_bias=True)
        x = Tensor(rng.standard_normal((2, 8, 6, 5)))
        np.testing.assert_array_equal(mab_forward(x, p).data, mab_by_hand(x, p).data)

    @pytest.mark.parametrize("depth", [0, 1, 2])
    def test_mirb(self, rng, depth):
        p = build_mirb(rng, 4, 8, depth=depth, heads=2, window=4, reduction=2)
        x = Tensor(rng.standard_normal((1, 4, 8, 8)))
        np.testing.assert_array_equal(mirb_forward(x, p).data, mirb_by_hand(x, p, Mode.TRAIN).data)

    @pytest.mark.parametrize("use_tvconv", [True, False])
    def test_cb(self, rng, use_tvconv):
        p = build_cb(rng, 4, 6, (2, 2), use_tvconv=use_tvconv, affine_channels=2, hidden=4)
        x = Tensor(rng.standard_normal((2, 4, 16, 16)))
        np.testing.assert_array_equal(cb_forward(x, p).data, cb_by_hand(x, p, Mode.TRAIN).data)


# ==================== MODEL ====================

class TestModelWiring:

    @pytest.mark.parametrize("variant", list(Variant))
    def test_forward_is_the_stage_chain(self, rng, variant):
        model = build_model(ModelConfig.tiny(variant=variant), seed=2)
        x = Tensor(rng.uniform(size=(1, 3, 64, 64)))
        stages = dcb_by_hand(x, model.dcb, Mode.INFER)
        stages = mirb_by_hand(stages, model.mirb, Mode.INFER)
        stages = cb_by_hand(stages, model.cb, Mode.INFER)
        expected = conv_by_hand(stages, model.head)
        np.testing.assert_array_equal(dtnet_forward(x, model, Mode.INFER).data, expected.data)

    @settings(max_examples=12, deadline=None)
    @given(w0=st.sampled_from([2, 4, 6]), w1=st.sampled_from([4, 8, 12]), w2=st.sampled_from([2, 6, 10]),
           classes=st.integers(1, 5), variant=st.sampled_from(list(Variant)))
    def test_channel_bookkeeping(self, w0, w1, w2, classes, variant):
        cfg = ModelConfig.tiny(widths=(w0, w1, w2), num_classes=classes, variant=variant)
        model = build_model(cfg)

        assert model.dcb.cbs1.in_channels == 3
        assert model.dcb.out_channels == w0
        assert model.mirb.cbs.in_channels == w0
        assert model.mirb.out_channels == w1
        assert all(m.wmsa.channels == w1 for m in model.mirb.mabs)
        assert [m.in_channels for m in model.cb.mpcms] == [w1, w2, w2]
        assert [m.out_channels for m in model.cb.mpcms] == [w1, w2, w2]
        assert [e.in_channels for e in model.cb.elans] == [w1, w2, w2]
        assert model.cb.out_channels == w2
        if variant.uses_tvconv:
            assert model.cb.tv.channels == w2
        else:
            assert model.cb.depthwise.groups == w2
        assert model.head.in_channels == w2
        assert model.head.out_channels == cfg.head_channels == cfg.num_anchors * (5 + classes)

        x = Tensor(np.zeros((1, 3, 64, 64)))
        o_dcb = dcb_forward(x, model.dcb, Mode.INFER)
        o_mirb = mirb_forward(o_dcb, model.mirb, Mode.INFER)
        o_cb = cb_forward(o_mirb, model.cb, Mode.INFER)
        assert (o_dcb.dims, o_mirb.dims, o_cb.dims) == ((1, w0, 32, 32), (1, w1, 16, 16), (1, w2, 2, 2))
