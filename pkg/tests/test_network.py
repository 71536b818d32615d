"""Segmentation network: shapes, determinism, initialization, sanity fit."""

import numpy as np
import pytest

from cacps.losses import dice_loss, one_hot_mask
from cacps.network import (
    NetSpec,
    NetworkError,
    forward,
    init_pair,
    init_params,
    param_count,
)
from cacps.optim import AdamW
from cacps.tensor import Tensor


def test_netspec_validation():
    with pytest.raises(NetworkError):
        NetSpec(num_classes=1)
    with pytest.raises(NetworkError):
        NetSpec(base_width=0)


def test_init_is_deterministic_per_seed():
    spec = NetSpec(base_width=4, depth=2)
    a = init_params(spec, 7)
    b = init_params(spec, 7)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)


def test_init_pair_requires_distinct_seeds_and_differs():
    spec = NetSpec(base_width=4, depth=1)
    with pytest.raises(NetworkError):
        init_pair(spec, 3, 3)
    pair = init_pair(spec, 1, 2)
    diffs = [np.abs(p.data - q.data).max() for p, q in zip(pair.params_1.values(), pair.params_2.values())]
    assert max(diffs) > 0.0
    shapes1 = [p.shape for p in pair.params_1.values()]
    shapes2 = [p.shape for p in pair.params_2.values()]
    assert shapes1 == shapes2


def test_biases_zero_and_kaiming_bound_respected():
    spec = NetSpec(in_channels=1, num_classes=3, base_width=8, depth=2)
    params = init_params(spec, 0)
    for name, p in params.items():
        if name.endswith(".b"):
            assert np.all(p.data == 0.0)
        else:
            c_in = p.shape[1] * p.shape[2] * p.shape[3]
            bound = np.sqrt(6.0 / c_in)
            assert np.abs(p.data).max() <= bound


def test_param_count_matches_hand_computed_sum():
    # in=1, classes=4, width=8, depth=3: widths 8/16/32, bottleneck 64.
    # Per conv: c_out*c_in*3*3 weights + c_out biases; head is 1x1.
    expected = (
        (72 + 8) + (576 + 8)            # enc0: 1->8, 8->8
        + (1152 + 16) + (2304 + 16)     # enc1: 8->16, 16->16
        + (4608 + 32) + (9216 + 32)     # enc2: 16->32, 32->32
        + (18432 + 64) + (36864 + 64)   # bottleneck: 32->64, 64->64
        + (27648 + 32) + (9216 + 32)    # dec2: 96->32, 32->32
        + (6912 + 16) + (2304 + 16)     # dec1: 48->16, 16->16
        + (1728 + 8) + (576 + 8)        # dec0: 24->8, 8->8
        + (32 + 4)                      # head: 8->4, 1x1
    )
    assert expected == 121996
    spec = NetSpec(in_channels=1, num_classes=4, base_width=8, depth=3)
    assert param_count(spec) == expected
    params = init_params(spec, 0)
    assert sum(p.size for p in params.values()) == expected


@pytest.mark.parametrize("use_norm", [False, True])
def test_forward_shapes_and_softmax_invariant(use_norm):
    spec = NetSpec(in_channels=1, num_classes=3, base_width=4, depth=2, instance_norm=use_norm)
    params = init_params(spec, 5)
    x = Tensor(np.random.default_rng(0).random((2, 1, 16, 16)))
    probs = forward(spec, params, x)
    assert probs.shape == (2, 3, 16, 16)
    assert np.abs(probs.data.sum(axis=1) - 1.0).max() < 1e-12
    probs2 = forward(spec, params, x)
    assert np.array_equal(probs.data, probs2.data)


def test_forward_rejects_bad_shapes():
    spec = NetSpec(in_channels=1, num_classes=3, base_width=4, depth=2)
    params = init_params(spec, 5)
    with pytest.raises(NetworkError):
        forward(spec, params, Tensor(np.zeros((1, 2, 16, 16))))  # wrong channels
    with pytest.raises(NetworkError):
        forward(spec, params, Tensor(np.zeros((1, 1, 18, 18))))  # not divisible by 4


def test_gradients_reach_every_parameter():
    spec = NetSpec(in_channels=1, num_classes=3, base_width=4, depth=2)
    params = init_params(spec, 5)
    x = Tensor(np.random.default_rng(1).random((1, 1, 8, 8)))
    probs = forward(spec, params, x)
    target = np.zeros((1, 3, 8, 8))
    target[:, 0] = 1.0
    dice_loss(probs, Tensor(target)).backward()
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached {name}"


def test_overfit_single_image_reaches_high_dice():
    # 200 AdamW steps on one 32x32 image must essentially memorize its mask
    rng = np.random.default_rng(42)
    spec = NetSpec(in_channels=1, num_classes=2, base_width=8, depth=2)
    params = init_params(spec, 3)

    mask = np.zeros((32, 32), dtype=np.int64)
    mask[8:24, 10:26] = 1
    image = 0.25 + 0.5 * mask + rng.normal(0, 0.05, size=(32, 32))
    x = Tensor(np.clip(image, 0, 1)[None, None])
    target = Tensor(one_hot_mask(mask[None], 2))

    opt = AdamW(params, lr=3e-3, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        loss = dice_loss(forward(spec, params, x), target)
        loss.backward()
        opt.step()

    pred = forward(spec, params, x).data.argmax(axis=1)[0]
    inter = np.logical_and(pred == 1, mask == 1).sum()
    dice_fg = 2.0 * inter / (max((pred == 1).sum() + (mask == 1).sum(), 1))
    assert dice_fg > 0.95
