import pytest
import torch
import torch.nn as nn

from fedshield.models import (ArchitectureConfig, DefenderModel, ModelParameters,
                              NoiseSpec, SharedClassifier, build_defender,
                              build_surrogate, init_parameters,
                              shared_parameters)
from fedshield.rng import generator


@pytest.mark.parametrize("size,latent,pool,feat", [
    (32, 10, 3, 2304),
    (28, 9, 3, 2304),
    (16, 5, 1, 256),
])
def test_arch_dimensions(size, latent, pool, feat):
    arch = ArchitectureConfig(input_shape=(3, size, size), num_classes=8)
    assert arch.latent_shape == (256, latent, latent)
    assert arch.predictor_pool_size == pool
    assert arch.predictor_in_features == feat


def test_arch_default_final_kernel():
    assert ArchitectureConfig((3, 32, 32), 10).final_deconv_kernel == 2
    assert ArchitectureConfig((3, 28, 28), 8).final_deconv_kernel == 4
    assert ArchitectureConfig((3, 28, 28), 8, final_deconv_kernel=2).final_deconv_kernel == 2


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchitectureConfig((3, 32, 16), 10)
    with pytest.raises(ValueError):
        ArchitectureConfig((3, 32, 32), 1)
    with pytest.raises(ValueError):
        ArchitectureConfig((3, 2, 2), 4)


def test_encoder_channel_sequence():
    arch = ArchitectureConfig((3, 32, 32), 10)
    model = DefenderModel(arch)
    convs = [m for m in model.encoder if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 128, 256, 256, 256, 256, 256, 256]
    assert all(c.kernel_size == (3, 3) and c.stride == (1, 1) and c.padding == (1, 1)
               for c in convs)
    pools = [m for m in model.encoder if isinstance(m, nn.MaxPool2d)]
    assert len(pools) == 1 and pools[0].kernel_size == 3


@pytest.mark.parametrize("size", [32, 28, 16])
def test_forward_shapes(size):
    arch = ArchitectureConfig((3, size, size), num_classes=8)
    model, _ = build_defender(arch, seed=0)
    x = torch.randn(2, 3, size, size, generator=generator(0))
    out = model(x, noise_mode="off")
    assert out.reconstruction.shape == (2, 3, size, size)
    assert out.logits.shape == (2, 8)
    assert out.latent.shape == (2,) + arch.latent_shape
    assert torch.equal(out.noisy_latent, out.latent)


def test_forward_rejects_wrong_shape():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    model, _ = build_defender(arch, seed=0)
    with pytest.raises(ValueError):
        model(torch.randn(2, 3, 32, 32), noise_mode="off")
    with pytest.raises(ValueError):
        model(torch.randn(2, 3, 16, 16), noise_mode="banana")


def test_forward_noise_modes():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    model, _ = build_defender(arch, seed=0, noise=NoiseSpec("fixed", 1.0, 0.1))
    model.eval()
    x = torch.randn(2, 3, 16, 16, generator=generator(1))
    off1 = model(x, noise_mode="off")
    off2 = model(x, noise_mode="off")
    assert torch.equal(off1.logits, off2.logits)
    s1 = model(x, noise_mode="sampled", seed=5)
    s2 = model(x, noise_mode="sampled", seed=5)
    s3 = model(x, noise_mode="sampled", seed=6)
    assert torch.equal(s1.logits, s2.logits)
    assert not torch.equal(s1.noisy_latent, s3.noisy_latent)
    assert not torch.equal(s1.noisy_latent, off1.latent)
    with pytest.raises(ValueError):
        model(x, noise_mode="sampled")


def test_init_deterministic():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    _, p1 = build_defender(arch, seed=42)
    _, p2 = build_defender(arch, seed=42)
    _, p3 = build_defender(arch, seed=43)
    assert p1.allclose(p2)
    assert not p1.allclose(p3)


def test_shared_parameters_exclude_private_groups():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    _, params = build_defender(arch, seed=0)
    shared = shared_parameters(params)
    groups = {ModelParameters.group_of(n) for n in shared.tensors}
    assert groups == {"encoder", "predictor"}
    assert len(shared) < len(params)


def test_parameter_round_trip_merge():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    _, params = build_defender(arch, seed=0)
    shared = params.subset(("encoder", "predictor"))
    local = params.subset(("decoder", "noise"))
    merged = shared.merge(local)
    assert set(merged.tensors) == set(params.tensors)
    assert merged.allclose(params)


def test_parameter_sub_and_add_scaled():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    _, a = build_defender(arch, seed=0)
    _, b = build_defender(arch, seed=1)
    delta = b.sub(a)
    back = a.add_scaled(delta, 1.0)
    assert back.allclose(b, atol=1e-6)


def test_parameter_group_validation():
    with pytest.raises(ValueError):
        ModelParameters({"mystery.weight": torch.zeros(2)})


def test_load_into_round_trip():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    m1, p1 = build_defender(arch, seed=0)
    m2, _ = build_defender(arch, seed=1)
    p1.load_into(m2)
    assert ModelParameters.from_module(m2).allclose(p1)


def test_surrogate_matches_defender_logits():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    model, params = build_defender(arch, seed=0)
    surrogate = build_surrogate(arch, shared_parameters(params))
    x = torch.randn(2, 3, 16, 16, generator=generator(2))
    model.eval()
    surrogate.eval()
    assert torch.allclose(model(x, noise_mode="off").logits, surrogate(x))


def test_surrogate_has_no_private_parameters():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    names = {n for n, _ in SharedClassifier(arch).named_parameters()}
    assert not any(n.startswith(("decoder", "noise")) for n in names)


def test_noise_spec_fixed():
    spec = NoiseSpec("fixed", mu0=2.0, sigma0=0.5)
    assert not any(p.requires_grad for p in spec.parameters())
    assert float(spec.sigma) == pytest.approx(0.5, rel=1e-6)
    z = spec.sample((4, 256, 5, 5), generator(0))
    assert z.shape == (4, 256, 5, 5)
    assert z.mean().item() == pytest.approx(2.0, abs=0.05)
    again = spec.sample((4, 256, 5, 5), generator(0))
    assert torch.equal(z, again)


def test_noise_spec_learnable():
    shape = (256, 5, 5)
    spec = NoiseSpec("learnable", mu0=1.0, sigma0=0.1, latent_shape=shape)
    assert all(p.requires_grad for p in spec.parameters())
    m = 256 * 5 * 5
    assert spec.mu.shape == (m,)
    assert torch.allclose(spec.sigma, torch.full((m,), 0.1), atol=1e-6)
    z = spec.sample((2,) + shape, generator(0))
    assert z.shape == (2,) + shape
    with pytest.raises(ValueError):
        spec.sample((2, 256, 4, 4), generator(0))


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("weird")
    with pytest.raises(ValueError):
        NoiseSpec("learnable")
    with pytest.raises(ValueError):
        NoiseSpec("fixed", sigma0=0.0)


def test_noise_spec_snapshot_round_trip():
    spec = NoiseSpec("learnable", 1.0, 0.1, latent_shape=(256, 5, 5))
    with torch.no_grad():
        spec.mu.add_(0.3)
    clone = NoiseSpec.from_snapshot(spec.snapshot())
    assert torch.equal(clone.mu, spec.mu)
    assert torch.equal(clone.rho, spec.rho)
    assert clone.mode == "learnable"


def test_sigma_positive_after_gradient_steps():
    spec = NoiseSpec("learnable", 1.0, 0.1, latent_shape=(256, 5, 5))
    with torch.no_grad():
        spec.rho.fill_(-50.0)  # even extreme rho keeps softplus(rho) > 0
    assert (spec.sigma > 0).all()


def test_decoder_output_padded_or_cropped():
    for size in (32, 28):
        arch = ArchitectureConfig((3, size, size), num_classes=8)
        model, _ = build_defender(arch, seed=0)
        z = torch.randn((1,) + arch.latent_shape, generator=generator(3))
        assert model.decoder(z).shape == (1, 3, size, size)


def test_init_parameters_covers_batchnorm():
    arch = ArchitectureConfig((3, 16, 16), num_classes=4)
    model, _ = build_defender(arch, seed=0)
    bn = model.decoder.bn1
    assert torch.equal(bn.weight, torch.ones_like(bn.weight))
    assert torch.equal(bn.running_var, torch.ones_like(bn.running_var))
