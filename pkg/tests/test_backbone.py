import numpy as np
import pytest

from vbmtl.backbone import Backbone, BackboneConfig, MaskingContractError, time_feature_mask
from vbmtl.diffcore import tensor as T


@pytest.fixture
def backbone(rng):
    return Backbone(BackboneConfig(), rng)


def test_default_stack_shapes(backbone, rng):
    stack = backbone.eval().encode(rng.normal(size=4000))
    assert len(stack) == 5
    assert all(s.shape == (31, 64) for s in stack.states)
    assert stack.top is stack[4]


def test_batched_shapes(backbone, rng):
    stack = backbone.eval().encode(rng.normal(size=(3, 4000)))
    assert all(s.shape == (3, 31, 64) for s in stack.states)


def test_zero_input_finite(backbone):
    stack = backbone.eval().encode(np.zeros(4000))
    assert all(np.isfinite(s.data).all() for s in stack.states)


def test_deterministic_without_masking(backbone, rng):
    wave = rng.normal(size=4000)
    backbone.eval()
    a, b = backbone.encode(wave), backbone.encode(wave)
    for x, y in zip(a.states, b.states):
        assert x.data.tobytes() == y.data.tobytes()


def test_wrong_length_rejected(backbone):
    with pytest.raises(ValueError, match="4000"):
        backbone.encode(np.zeros(3999))


def test_masking_in_eval_is_contract_violation(backbone):
    backbone.eval()
    with pytest.raises(MaskingContractError):
        backbone.encode(np.zeros(4000), rng=np.random.default_rng(0), mask=True)


def test_training_masking_needs_rng(backbone):
    backbone.train()
    with pytest.raises(ValueError, match="rng"):
        backbone.encode(np.zeros(4000))


def test_masking_only_in_training(backbone, rng):
    backbone.train()
    backbone.encode(rng.normal(size=(2, 4000)), rng=rng)
    assert backbone.last_masked
    backbone.eval()
    backbone.encode(rng.normal(size=(2, 4000)))
    assert not backbone.last_masked


def test_gradient_reaches_front_end(backbone, rng):
    backbone.eval()
    stack = backbone.encode(rng.normal(size=(2, 4000)))
    T.sum_(stack[1] * rng.normal(size=stack[1].shape)).backward()
    assert all(np.linalg.norm(w.grad) > 0 for w in backbone.conv_w)


def test_frame_order_matters(rng):
    # positions make the encoder order-sensitive: permute frames at the transformer input
    cfg = BackboneConfig()
    bb = Backbone(cfg, rng).eval()
    feats = T.Tensor(rng.normal(size=(31, 64)))
    perm = rng.permutation(31)

    def top(f):
        x = f + bb.positions
        for layer in bb.layers:
            x = layer(x)
        return x.data

    assert not np.allclose(top(feats)[perm], top(T.Tensor(feats.data[perm])))


class TestMask:
    def test_zero_prob_identity(self, rng):
        x = T.Tensor(rng.normal(size=(20, 8)))
        assert time_feature_mask(x, 0.0, rng) is x

    def test_saturated_prob_clamps(self, rng):
        out = time_feature_mask(T.Tensor(rng.normal(size=(50, 8))), 1.0, rng)
        assert np.count_nonzero(out.data) == 0

    def test_rows_and_columns_zeroed_whole(self, rng):
        out = time_feature_mask(T.Tensor(np.ones((400, 64))), 0.2, rng).data
        row_zero = (out == 0).all(axis=1)
        col_zero = (out == 0).all(axis=0)
        expected = np.ones_like(out)
        expected[row_zero] = 0
        expected[:, col_zero] = 0
        np.testing.assert_array_equal(out, expected)


class TestConfig:
    def test_frames(self):
        assert BackboneConfig().n_frames == 31
        assert BackboneConfig(input_len=512).n_frames == 4

    @pytest.mark.parametrize("kwargs", [
        {"d_model": 30, "n_heads": 4}, {"n_layers": 0}, {"mask_prob": 1.0}, {"mask_prob": -0.1},
        {"conv_kernels": (10, 8), "conv_strides": (8, 4, 4)}, {"conv_kernels": (9, 8, 4)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            BackboneConfig(**kwargs)
