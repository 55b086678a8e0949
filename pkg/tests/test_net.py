import numpy as np
import pytest

from disqhnet import losses, net
from disqhnet import ndgrad as nd
from disqhnet.errors import ConfigError, ModeError, ShapeError
from disqhnet.net import DisQHNet, ModelConfig

TARGET_PARAMS = 4_931_877


def tiny_config(**kw):
    base = dict(ru_widths=(2, 3), c_widths=(2, 2), p=2, ru_K=8, c_K=6, skip_channels=1, max_locations=64)
    base.update(kw)
    return ModelConfig.toy(**base)


def inputs(rng, n=8):
    return rng.normal(size=(1, n, n, n)), rng.normal(size=(1, n, n, n)), rng.normal(size=(1, n, n, n))


@pytest.fixture(scope="module")
def toy_model():
    return DisQHNet(ModelConfig.toy())


# --- configuration and size -----------------------------------------------------

def test_full_parameter_count_within_two_percent():
    n = DisQHNet(ModelConfig.full()).param_count()
    assert abs(n - TARGET_PARAMS) / TARGET_PARAMS <= 0.02


def test_codebooks_are_not_counted_as_parameters_by_default(toy_model):
    names = [name for name, _ in toy_model.named_parameters()]
    assert not any("codebook" in name for name in names)
    learn = DisQHNet(ModelConfig.toy(learnable_codebook=True))
    assert learn.param_count() == toy_model.param_count() + 2 * 64 * 8


@pytest.mark.parametrize("kw", [dict(ru_widths=()), dict(p=0), dict(ru_K=7), dict(stabilizer="x"),
                                dict(p_swap=2.0), dict(tau=0.0), dict(c_widths=(4,))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig.toy(**kw)


def test_branch_channels_cover_output():
    for c in (1, 4, 7, 32):
        parts = net.branch_channels(c)
        assert sum(parts) == c and len(parts) == len(net.KERNEL_SIZES)


def test_mkconv_fused_kernel_equals_separate_branches():
    rng = np.random.default_rng(0)
    block = net.MkConvBlock(2, 8, rng, stride=1, residual=False)
    x = nd.Tensor(rng.normal(size=(2, 6, 6, 6)))
    fused = block(x).data
    # recompute with one convolution per branch
    outs = []
    for conv, k in zip(block.branches, net.KERNEL_SIZES):
        outs.append(nd.conv3d(x, conv.weight, conv.bias, padding=k // 2).data)
    y = nd.mish(nd.instance_norm(nd.Tensor(np.concatenate(outs)))).data
    np.testing.assert_allclose(fused, y, atol=1e-10)


# --- forward behaviour ---------------------------------------------------------------

def test_forward_shapes(toy_model):
    rng = np.random.default_rng(1)
    x1, x2, _ = inputs(rng, 16)
    out = toy_model.forward(x1, x2, mode="train", rng=rng)
    assert out.y_hat.shape == (1, 16, 16, 16)
    assert [r.shape[1:] for r in out.skip_recons] == out.pyramid.shapes
    for k in ("r", "u1", "u2", "c"):
        assert out.codes[k].shape == (8, 4, 4, 4)
    assert set(out.parts) == {"r1", "u1", "r2", "u2", "c"}


def test_inference_is_deterministic_and_skips_aux(toy_model):
    rng = np.random.default_rng(2)
    x1, x2, _ = inputs(rng, 16)
    a = toy_model.forward(x1, x2, mode="infer")
    b = toy_model.forward(x1, x2, mode="infer")
    np.testing.assert_array_equal(a.y_hat.data, b.y_hat.data)
    assert a.skip_recons == [] and a.info_loss.item() == 0.0 and a.latents is None


def test_forward_validates_inputs(toy_model):
    rng = np.random.default_rng(3)
    x1, x2, _ = inputs(rng, 16)
    with pytest.raises(ShapeError):
        toy_model.forward(x1[:, :15], x2[:, :15], mode="infer")
    with pytest.raises(ShapeError):
        toy_model.forward(x1, x2[:, :8, :8, :8], mode="infer")
    with pytest.raises(ModeError):
        toy_model.forward(x1, x2, mode="eval")
    with pytest.raises(ValueError):
        toy_model.forward(x1, x2, mode="train")


def test_quantized_codes_come_from_the_right_slices(toy_model):
    rng = np.random.default_rng(4)
    x1, x2, _ = inputs(rng, 16)
    out = toy_model.forward(x1, x2, mode="infer")
    half = toy_model.cfg.ru_K // 2
    assert out.parts["r1"].indices.max() < half and out.parts["r2"].indices.max() < half
    assert out.parts["u1"].indices.min() >= half and out.parts["u2"].indices.min() >= half


def test_ablation_replaces_partition(toy_model):
    rng = np.random.default_rng(5)
    x1, x2, _ = inputs(rng, 16)
    base = toy_model.forward(x1, x2, mode="infer")
    zero = np.zeros(base.codes["c"].shape)
    out = toy_model.forward(x1, x2, mode="infer", ablate={"c": zero})
    np.testing.assert_array_equal(out.codes["c"].data, zero)
    with pytest.raises(ConfigError):
        toy_model.forward(x1, x2, mode="infer", ablate={"q": zero})
    with pytest.raises(ShapeError):
        toy_model.forward(x1, x2, mode="infer", ablate={"c": np.zeros((1, 1, 1, 1))})


def test_pid_latents_cover_sampled_locations():
    model = DisQHNet(tiny_config(max_locations=10))
    rng = np.random.default_rng(6)
    x1, x2, _ = inputs(rng)
    out = model.forward(x1, x2, mode="train", rng=rng)
    lat = out.latents
    assert lat.r1.shape == (8, 2) and set(lat.assign) == {"r1", "u1", "r2", "u2", "c"}
    out2 = DisQHNet(tiny_config(max_locations=3)).forward(x1, x2, mode="train", rng=rng)
    assert out2.latents.c.shape == (3, 2)


def test_state_dict_round_trip(toy_model):
    other = DisQHNet(ModelConfig.toy(seed=9))
    other.load_state_dict(toy_model.state_dict())
    rng = np.random.default_rng(7)
    x1, x2, _ = inputs(rng, 16)
    np.testing.assert_array_equal(other.forward(x1, x2, mode="infer").y_hat.data,
                                  toy_model.forward(x1, x2, mode="infer").y_hat.data)


def test_load_state_dict_rejects_mismatch(toy_model):
    state = toy_model.state_dict()
    with pytest.raises(ShapeError):
        DisQHNet(ModelConfig.toy(p=4)).load_state_dict(state)


# --- bottleneck audit ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["train", "infer"])
@pytest.mark.parametrize("pseudo", [False, True])
def test_decoder_only_sees_quantized_latents_and_edges(mode, pseudo):
    model = DisQHNet(ModelConfig.toy(latent_pseudo_skip=pseudo))
    rng = np.random.default_rng(8)
    x1, x2, _ = inputs(rng, 16)
    out = model.forward(x1, x2, mode=mode, rng=rng)
    assert net.bottleneck_audit(out) == []


def test_audit_flags_unquantized_path():
    model = DisQHNet(ModelConfig.toy())
    model.quantize_enabled = False
    rng = np.random.default_rng(9)
    x1, x2, _ = inputs(rng, 16)
    leaks = net.bottleneck_audit(model.forward(x1, x2, mode="train", rng=rng))
    assert leaks and all("encoder" in leak for leak in leaks)


# --- gradients -----------------------------------------------------------------------

def randomize_heads(model, rng):
    """Zero-initialized heads block gradients upstream; give them random weights."""
    for head in [model.decoder.out] + list(model.decoder.aux):
        head.weight.data = rng.normal(size=head.weight.shape) * 0.5


def _subset(params, rng, n):
    idx = rng.choice(len(params), size=min(n, len(params)), replace=False)
    return [params[i] for i in sorted(idx)]


@pytest.mark.parametrize("seed", range(20))
def test_full_forward_gradient(seed):
    """Continuous path end to end: every module between input and loss."""
    rng = np.random.default_rng(seed)
    model = DisQHNet(tiny_config(seed=seed, latent_pseudo_skip=seed % 2 == 1))
    model.quantize_enabled = False
    randomize_heads(model, rng)
    x1, x2, y = inputs(rng)
    cfg = losses.LossConfig(recon_kind=("mse", "vcc+ag")[seed % 2])
    params = _subset([t for _, t in model.named_parameters()], rng, 4)

    def fn():
        out = model.forward(x1, x2, mode="train", rng=np.random.default_rng(seed))
        return losses.total_loss(out, y, cfg).total

    nd.gradcheck(fn, params, max_coords=2, rng=rng, atol=1e-7)
    assert any(np.abs(p.grad).sum() > 0 for p in params if p is not model.decoder.out.bias)


@pytest.mark.parametrize("seed", range(5))
def test_quantized_forward_gradient_reaching_decoder(seed):
    rng = np.random.default_rng(100 + seed)
    model = DisQHNet(tiny_config(seed=seed))
    randomize_heads(model, rng)
    x1, x2, y = inputs(rng)
    dec = [t for name, t in model.named_parameters() if name.startswith("decoder")]
    params = _subset(dec, rng, 4)
    cfg = losses.LossConfig()

    def fn():
        out = model.forward(x1, x2, mode="train", rng=np.random.default_rng(seed), track_usage=False)
        return losses.total_loss(out, y, cfg).total

    nd.gradcheck(fn, params, max_coords=2, rng=rng, atol=1e-7)


def test_straight_through_gradient_reaches_encoder():
    model = DisQHNet(tiny_config())
    rng = np.random.default_rng(10)
    x1, x2, y = inputs(rng)
    randomize_heads(model, rng)
    out = model.forward(x1, x2, mode="infer")
    losses.mse(out.y_hat, y).backward()
    enc = [t for _, t in model.encoder_parameters()]
    assert any(t.grad is not None and np.abs(t.grad).sum() > 0 for t in enc)
