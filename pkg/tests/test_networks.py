import numpy as np
import pytest

from advseg.networks import (
    LayerSpec,
    NetSpec,
    affected_outputs,
    build_adversary,
    build_segmenter,
    conv,
    forward,
    init_params,
    load_params,
    load_spec,
    param_count,
    receptive_field,
    same_conv,
    save_params,
    save_spec,
    spec_from_text,
    spec_to_text,
)
from advseg.tensor import ShapeError, Tensor, backward, grad_check, reduce_sum


def _constant_positive_params(spec, seed=0):
    """Positive, per-channel-varying weights so no relu goes dead and no
    softmax shift cancellation hides a change."""
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    for name, t in params.items():
        if name.endswith(".kernel"):
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape) / fan_in
        else:
            t.data[...] = 0.1
    return params


def test_segmenter_output_shape_and_distribution():
    spec = build_segmenter(4)
    params = init_params(spec, 1)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 16, 16)))
    out = forward(spec, params, x)
    assert out.shape == (1, 4, 8, 8)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_segmenter_receptive_field():
    assert receptive_field(build_segmenter(4)) == (66, 66, 2)
    rf0 = receptive_field(build_segmenter(4, n_context_layers=0))[0]
    rf4 = receptive_field(build_segmenter(4, n_context_layers=4))[0]
    # four context convs at dilations 1,2,4,8 add 2*(1+2+4+8)=30 output units
    assert (rf4 - rf0) // 2 == 30


def test_adversary_fov_values():
    assert receptive_field(build_adversary(4, "large"))[:2] == (34, 34)
    assert receptive_field(build_adversary(4, "small"))[:2] == (18, 18)


def test_large_fov_exceeds_small():
    for cap in ("full", "light"):
        large = receptive_field(build_adversary(4, "large", cap))[0]
        small = receptive_field(build_adversary(4, "small", cap))[0]
        assert large > small


def test_light_has_fewer_params():
    for fov in ("large", "small"):
        assert (param_count(build_adversary(4, fov, "light"))
                < param_count(build_adversary(4, fov, "full")))


def test_two_branch_balanced_channels():
    spec = build_adversary(4, "large", two_branch=True)
    concat = [lay for lay in spec.layers if lay.kind == "concat_branches"][0]
    label_out = spec.layers[0].out_ch
    branch_out = [bl for bl in concat.branch if bl.kind == "conv"][-1].out_ch
    assert label_out == branch_out == 12
    assert spec.image_channels == 3


def test_adversary_grid_16x_smaller_than_segmenter_output():
    seg = build_segmenter(4)
    adv = build_adversary(4, "large")
    seg_params = init_params(seg, 0)
    adv_params = init_params(adv, 1)
    x = Tensor(np.random.default_rng(2).uniform(size=(1, 3, 32, 32)))
    probs = forward(seg, seg_params, x)
    grid = forward(adv, adv_params, probs)
    assert probs.shape == (1, 4, 16, 16)
    assert grid.shape == (1, 1, 4, 4)
    assert probs.shape[2] * probs.shape[3] == 16 * grid.shape[2] * grid.shape[3]
    assert np.all(grid.data > 0) and np.all(grid.data < 1)


def test_softmax2_head_option():
    spec = build_adversary(4, "small", head="softmax2")
    params = init_params(spec, 0)
    x = Tensor(np.random.default_rng(3).uniform(size=(1, 4, 8, 8)))
    out = forward(spec, params, x)
    assert out.shape[1] == 2
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_channel_chain_validation():
    with pytest.raises(ShapeError):
        NetSpec("segmenter", (conv(3, 8, 3), conv(4, 8, 3)), 3, 8)
    with pytest.raises(ShapeError):
        NetSpec("segmenter", (conv(3, 8, 3),), 3, 9)


def test_receptive_field_examples():
    two_convs = NetSpec("segmenter", (same_conv(1, 1, 3), same_conv(1, 1, 3)), 1, 1)
    assert receptive_field(two_convs)[:2] == (5, 5)
    dilated = NetSpec("segmenter", (same_conv(1, 1, 3, dilation=2),), 1, 1)
    assert receptive_field(dilated)[:2] == (5, 5)
    pointwise = NetSpec("segmenter", (conv(1, 1, 1),), 1, 1)
    assert receptive_field(pointwise) == (1, 1, 1)


def test_receptive_field_rejects_unknown_kind():
    spec = build_segmenter(2)
    bad = NetSpec("segmenter", spec.layers[:-1] + (LayerSpec("mystery"),),
                  3, spec.out_channels)
    with pytest.raises(ValueError):
        receptive_field(bad)


def _perturbation_box(spec, params, x_base, pixel, inputs_fn):
    base = forward(spec, params, inputs_fn(x_base)).data
    x_pert = x_base.copy()
    x_pert[0, :, pixel[0], pixel[1]] += 0.5
    pert = forward(spec, params, inputs_fn(x_pert)).data
    changed = np.argwhere(np.abs(pert - base) > 0)
    assert changed.size, "perturbation produced no change"
    return (changed[:, 2].min(), changed[:, 2].max(),
            changed[:, 3].min(), changed[:, 3].max()), base.shape


@pytest.mark.parametrize("builder,in_hw", [
    (lambda: build_segmenter(3, channels_base=6, n_context_layers=2), 16),
    (lambda: build_adversary(3, "large", "light"), 16),
    (lambda: build_adversary(3, "small", "light"), 16),
])
def test_perturbation_matches_analytic_rf(builder, in_hw):
    spec = builder()
    params = _constant_positive_params(spec)
    rng = np.random.default_rng(4)
    cin = spec.in_channels
    x = np.ones((1, cin, in_hw, in_hw))
    for pixel in [(in_hw // 2, in_hw // 2), (1, 2), (in_hw - 2, 3)]:
        box, out_shape = _perturbation_box(spec, params, x, pixel, lambda t: Tensor(t))
        ai, bi = affected_outputs(spec, pixel[0], out_shape[2])
        aj, bj = affected_outputs(spec, pixel[1], out_shape[3])
        assert box == (ai, bi, aj, bj)


def test_two_branch_perturbation_label_path():
    spec = build_adversary(3, "large", "light", two_branch=True)
    params = _constant_positive_params(spec)
    x = np.ones((1, 3, 16, 16))
    img = Tensor(np.ones((1, 3, 16, 16)))
    pixel = (8, 8)
    box, out_shape = _perturbation_box(spec, params, x, pixel,
                                       lambda t: (Tensor(t), img))
    ai, bi = affected_outputs(spec, pixel[0], out_shape[2])
    aj, bj = affected_outputs(spec, pixel[1], out_shape[3])
    assert box == (ai, bi, aj, bj)


def test_zero_input_zero_bias_gives_half_grid():
    spec = build_adversary(2, "large")
    params = init_params(spec, 5)
    x = Tensor(np.zeros((1, 2, 8, 8)))
    out = forward(spec, params, x)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-15)


def test_forward_deterministic():
    spec = build_segmenter(3, channels_base=4, n_context_layers=1)
    params = init_params(spec, 6)
    x = Tensor(np.random.default_rng(7).uniform(size=(1, 3, 8, 8)))
    a = forward(spec, params, x).data
    b = forward(spec, params, x).data
    assert a.tobytes() == b.tobytes()


def test_init_params_seeded_and_bounded():
    spec = build_adversary(4, "small", two_branch=True)
    p1 = init_params(spec, 11)
    p2 = init_params(spec, 11)
    assert p1.keys() == p2.keys()
    for name in p1:
        assert p1[name].data.tobytes() == p2[name].data.tobytes()
        if name.endswith(".bias"):
            assert np.all(p1[name].data == 0.0)
        else:
            t = p1[name]
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            fan_out = t.shape[0] * t.shape[2] * t.shape[3]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.all(np.abs(t.data) <= bound)
    p3 = init_params(spec, 12)
    assert p1["L0.kernel"].data.tobytes() != p3["L0.kernel"].data.tobytes()


def test_end_to_end_grad_check_small_instance():
    from advseg.gradcheck import find_composition_instance

    seg, adv, seg_params, adv_params, x, _ = find_composition_instance()

    def f(_):
        probs = forward(seg, seg_params, x)
        grid = forward(adv, adv_params, probs)
        return reduce_sum(grid * grid)

    for name in ("L0.kernel", "L0.bias", "L5.kernel"):
        assert grad_check(f, seg_params[name]) < 1e-4, name


def test_params_roundtrip(tmp_path):
    spec = build_adversary(3, "large", "light", two_branch=True)
    params = init_params(spec, 13)
    path = tmp_path / "ckpt.advt"
    save_params(params, path)
    back = load_params(path)
    assert list(back.keys()) == list(params.keys())
    for name in params:
        assert back[name].data.tobytes() == params[name].data.tobytes()
        assert back[name].requires_grad


def test_spec_text_roundtrip(tmp_path):
    for spec in (build_segmenter(5, channels_base=8, n_context_layers=3),
                 build_adversary(5, "small", "light", two_branch=True),
                 build_adversary(15, "large", head="softmax2")):
        text = spec_to_text(spec)
        assert spec_from_text(text) == spec
        path = tmp_path / "net.spec"
        save_spec(spec, path)
        assert load_spec(path) == spec


def test_forward_shape_errors():
    spec = build_segmenter(2)
    params = init_params(spec, 0)
    with pytest.raises(ShapeError):
        forward(spec, params, Tensor(np.zeros((1, 4, 8, 8))))
    two = build_adversary(2, "small", two_branch=True)
    with pytest.raises(ShapeError):
        forward(two, init_params(two, 0), Tensor(np.zeros((1, 2, 8, 8))))
