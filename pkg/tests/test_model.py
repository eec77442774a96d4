import numpy as np
import pytest
import torch

from foveal_mim.model import (
    LATENT_SHAPE,
    ArchitectureSpec,
    ProbeHead,
    build_autoencoder,
    count_parameters,
    decode,
    encode,
    load_checkpoint,
    parameter_checksum,
    probe_forward,
    reconstruct,
    save_checkpoint,
    TransposedConv3x3,
)

from oracles import gradient_check


@pytest.fixture(scope="module")
def model():
    return build_autoencoder(seed=0)


def test_encoder_shape(model, rng):
    z = encode(model, rng.random((2, 96, 96, 3), dtype=np.float32))
    assert z.shape == (2, *LATENT_SHAPE)


def test_decoder_shape_and_range(model, rng):
    out = decode(model, rng.normal(size=(2, 12, 12, 128)).astype(np.float32) * 5)
    assert out.shape == (2, 96, 96, 3)
    assert out.min() > 0 and out.max() < 1


def test_decoder_rejects_wrong_latent(model):
    with pytest.raises(ValueError):
        decode(model, np.zeros((1, 6, 6, 128), dtype=np.float32))


def test_encoder_rejects_wrong_image(model):
    with pytest.raises(ValueError):
        encode(model, np.zeros((1, 32, 32, 3), dtype=np.float32))


def test_architecture_layout():
    spec = ArchitectureSpec()
    assert spec.stage_channels == (32, 64, 128)
    assert spec.downsample_blocks == (1, 4, 7)
    assert spec.latent_dim == 18432


def test_architecture_rejects_mismatched_latent():
    with pytest.raises(ValueError):
        ArchitectureSpec(base_channels=16)


def test_parameter_count(model):
    assert count_parameters(model) == 2_144_966


def test_same_seed_same_init():
    a, b = build_autoencoder(seed=3), build_autoencoder(seed=3)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(a) != parameter_checksum(build_autoencoder(seed=4))


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_autoencoder(ArchitectureSpec.reduced(), seed=11)
    assert torch.equal(torch.rand(1), expected)


def test_batch_order_and_duplicates(model, rng):
    x = rng.random((3, 96, 96, 3), dtype=np.float32)
    x[2] = x[0]
    z = encode(model, x)
    single = encode(model, x[1:2])
    np.testing.assert_allclose(z[1], single[0], atol=1e-5)
    np.testing.assert_allclose(z[0], z[2], atol=1e-6)


def test_distinct_inputs_distinct_latents(model):
    z = encode(model, np.stack([np.zeros((96, 96, 3)), np.ones((96, 96, 3))]).astype(np.float32))
    assert np.linalg.norm(z[0] - z[1]) > 0


def test_reconstruct_range(model, rng):
    out = reconstruct(model, rng.random((1, 96, 96, 3), dtype=np.float32))
    assert out.shape == (1, 96, 96, 3) and 0 < out.min() and out.max() < 1


def test_probe_head_contracts():
    head = ProbeHead()
    assert head.weight_count == 184_320
    assert tuple(head.weight.shape) == (10, 18432)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    assert torch.equal(probe_forward(head, torch.randn(12, 12, 128)), torch.zeros(1, 10))
    latent = torch.zeros(12, 12, 128)
    latent[3, 4, 5] = 2.5
    flat = latent.reshape(-1)
    j = int(torch.nonzero(flat)[0])
    with torch.no_grad():
        head.weight[7, j] = 1.0
    logits = probe_forward(head, latent)
    assert logits[0, 7].item() == pytest.approx(2.5)
    assert int(logits.argmax()) == 7


def test_probe_head_rejects_wrong_width():
    with pytest.raises(ValueError):
        probe_forward(ProbeHead(), torch.zeros(2, 100))


def test_checkpoint_roundtrip(tmp_path):
    m = build_autoencoder(ArchitectureSpec.reduced(), seed=2)
    path = save_checkpoint(m, tmp_path / "epoch_3", epoch=3)
    loaded, meta = load_checkpoint(path)
    assert meta["epoch"] == 3
    assert parameter_checksum(loaded) == meta["checksum"] == parameter_checksum(m)


def test_gradient_check():
    assert gradient_check() < 1e-3


@pytest.mark.parametrize("in_ch,out_ch", [(4, 4), (6, 3)])
def test_transposed_conv3x3_matches_reference(in_ch, out_ch):
    torch.manual_seed(0)
    fast = TransposedConv3x3(in_ch, out_ch).double()
    ref = torch.nn.ConvTranspose2d(in_ch, out_ch, 3, padding=1).double()
    ref.load_state_dict(fast.state_dict())
    x = torch.rand(2, in_ch, 9, 7, dtype=torch.float64, requires_grad=True)
    y_fast, y_ref = fast(x), ref(x)
    assert torch.allclose(y_fast, y_ref, atol=1e-12)
    g = torch.rand_like(y_ref)
    gx_fast, gw_fast = torch.autograd.grad(y_fast, (x, fast.weight), g)
    gx_ref, gw_ref = torch.autograd.grad(y_ref, (x, ref.weight), g)
    assert torch.allclose(gx_fast, gx_ref, atol=1e-12)
    assert torch.allclose(gw_fast, gw_ref, atol=1e-12)
