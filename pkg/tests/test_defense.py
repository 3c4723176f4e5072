import copy

import pytest
import torch

from fedshield.data import make_synthetic
from fedshield.defense import (BidoStrategy, DefenseConfig, DpSgdStrategy,
                               NoDefense, PretrainLog, ProposedStrategy,
                               dp_sgd_step, make_strategy, pretrain_noise)
from fedshield.models import (ArchitectureConfig, ModelParameters, NoiseSpec,
                              build_defender)
from fedshield.objectives import cross_entropy
from fedshield.rng import generator


@pytest.fixture(scope="module")
def arch():
    return ArchitectureConfig((3, 16, 16), num_classes=4)


@pytest.fixture(scope="module")
def batch():
    split = make_synthetic(16, (3, 16, 16), num_classes=4, seed=0)
    return split.images[:8], split.labels[:8]


def test_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig(kind="mystery")
    with pytest.raises(ValueError):
        DefenseConfig(alpha=-1)
    with pytest.raises(ValueError):
        DefenseConfig(sigma_dp=-0.1)
    with pytest.raises(ValueError):
        DefenseConfig(first_step="top")
    with pytest.raises(ValueError):
        DefenseConfig(optimizer="rmsprop")


def test_config_optimizer_defaults():
    assert DefenseConfig(kind="none").resolved_optimizer == "sgd"
    assert DefenseConfig(kind="dp_sgd").resolved_optimizer == "sgd"
    assert DefenseConfig(kind="proposed_fixed").resolved_optimizer == "adam"
    assert DefenseConfig(kind="bido").resolved_optimizer == "adam"
    assert DefenseConfig(kind="none", optimizer="adam").resolved_optimizer == "adam"


def test_config_labels():
    assert DefenseConfig(kind="proposed_fixed", mu0=0.01).hyperparameter_label() == "0.01"
    assert DefenseConfig(kind="proposed_learnable").hyperparameter_label() == "learned"
    assert DefenseConfig(kind="dp_sgd", sigma_dp=0.1).hyperparameter_label() == "0.1"
    assert DefenseConfig(kind="bido", lambda_x=0.5,
                         lambda_y=5.0).hyperparameter_label() == "0.5,5.0"
    assert DefenseConfig(kind="none").hyperparameter_label() == "-"


def test_eval_noise_mode():
    assert DefenseConfig(kind="proposed_fixed").eval_noise_mode() == "sampled"
    assert DefenseConfig(kind="proposed_fixed", noise_eval="off").eval_noise_mode() == "off"
    assert DefenseConfig(kind="dp_sgd").eval_noise_mode() == "off"


def test_make_strategy_dispatch(arch):
    for kind, klass in [("none", NoDefense), ("proposed_fixed", ProposedStrategy),
                        ("dp_sgd", DpSgdStrategy), ("bido", BidoStrategy)]:
        model, _ = build_defender(arch, seed=0)
        strat = make_strategy(model, DefenseConfig(kind=kind), seed=0)
        assert isinstance(strat, klass)


def test_no_defense_learns(arch, batch):
    model, _ = build_defender(arch, seed=0)
    strat = make_strategy(model, DefenseConfig(kind="none", lr=0.05), seed=0)
    images, labels = batch
    first = strat.step(images, labels).item()
    for _ in range(10):
        last = strat.step(images, labels).item()
    assert last < first


def test_proposed_freezes_noise(arch, batch):
    noise = NoiseSpec("learnable", 1.0, 0.1, latent_shape=arch.latent_shape)
    model, _ = build_defender(arch, seed=0, noise=noise)
    strat = make_strategy(model, DefenseConfig(kind="proposed_learnable", lr=1e-3),
                          seed=0)
    mu_before = model.noise.mu.detach().clone()
    images, labels = batch
    for _ in range(2):
        lv = strat.step(images, labels)
    assert torch.equal(model.noise.mu, mu_before)
    assert set(lv.components) == {"decoder", "ce", "corr"}


def test_proposed_updates_both_branches(arch, batch):
    model, before = build_defender(arch, seed=0, noise=NoiseSpec("fixed", 1.0, 0.1))
    strat = make_strategy(model, DefenseConfig(kind="proposed_fixed", lr=1e-3), seed=0)
    images, labels = batch
    strat.step(images, labels)
    after = ModelParameters.from_module(model)
    for group in ("encoder", "decoder", "predictor"):
        delta = after.subset([group]).sub(before.subset([group]))
        assert any(t.abs().max() > 0 for _, t in delta)


def test_proposed_first_step_flag_changes_result(arch, batch):
    images, labels = batch
    results = {}
    for mode in ("full", "decoder"):
        model, _ = build_defender(arch, seed=0, noise=NoiseSpec("fixed", 1.0, 0.1))
        strat = make_strategy(
            model, DefenseConfig(kind="proposed_fixed", lr=1e-2, first_step=mode),
            seed=0,
        )
        strat.step(images, labels)
        results[mode] = ModelParameters.from_module(model)
    assert not results["full"].allclose(results["decoder"])


def test_proposed_alpha_zero_second_step_is_plain_ce(arch, batch):
    # with alpha=0 the correlation penalty contributes exactly zero gradient
    from fedshield.objectives import predictor_loss

    model, _ = build_defender(arch, seed=0, noise=NoiseSpec("fixed", 1.0, 0.1))
    images, labels = batch
    out = model(images, noise_mode="sampled", seed=1)
    lv = predictor_loss(labels, out.logits, images, out.reconstruction, alpha=0.0)
    ce = cross_entropy(labels, out.logits)
    w = model.predictor[-1].weight
    g1 = torch.autograd.grad(lv.value, w, retain_graph=True)[0]
    g2 = torch.autograd.grad(ce, w)[0]
    assert torch.equal(g1, g2)


def test_dp_sgd_sigma_zero_is_vanilla_sgd(arch, batch):
    images, labels = batch
    model_a, init = build_defender(arch, seed=0)
    strat = make_strategy(model_a, DefenseConfig(kind="dp_sgd", lr=0.01), seed=0)
    strat.step(images, labels)

    model_b, _ = build_defender(arch, seed=0)
    opt = torch.optim.SGD([p for p in model_b.parameters() if p.requires_grad],
                          lr=0.01)
    out = model_b(images, noise_mode="off", with_reconstruction=False)
    ce = cross_entropy(labels, out.logits)
    opt.zero_grad()
    ce.backward()
    opt.step()
    assert ModelParameters.from_module(model_a).allclose(
        ModelParameters.from_module(model_b))


def test_dp_sgd_matches_manual_arithmetic(arch, batch):
    """Oracle: autograd CE gradient, clip to global norm, add seeded noise,
    one plain SGD step, all done by hand."""
    images, labels = batch
    lr, sigma, clip, seed = 0.05, 0.02, 1.0, 123

    model, init = build_defender(arch, seed=0)
    dp_sgd_step(model, images, labels, sigma_dp=sigma, clip_norm=clip, lr=lr,
                seed=seed)
    got = ModelParameters.from_module(model)

    ref, _ = build_defender(arch, seed=0)
    out = ref(images, noise_mode="off", with_reconstruction=False)
    ce = cross_entropy(labels, out.logits)
    trainable = [p for p in ref.parameters() if p.requires_grad]
    raw = torch.autograd.grad(ce, trainable, allow_unused=True)
    pairs = [(p, g.clone()) for p, g in zip(trainable, raw) if g is not None]
    total = torch.sqrt(sum((g * g).sum() for _, g in pairs))
    if total > clip:
        pairs = [(p, g * (clip / total)) for p, g in pairs]
    gen = generator(seed)
    with torch.no_grad():
        for p, g in pairs:
            noisy = g + sigma * torch.randn(g.shape, generator=gen)
            p.sub_(lr * noisy)
    want = ModelParameters.from_module(ref)
    assert got.allclose(want, atol=1e-7)


def test_dp_sgd_seed_reproducible(arch, batch):
    images, labels = batch
    outs = []
    for _ in range(2):
        model, _ = build_defender(arch, seed=0)
        dp_sgd_step(model, images, labels, sigma_dp=0.1, clip_norm=None,
                    lr=0.01, seed=7)
        outs.append(ModelParameters.from_module(model))
    assert outs[0].allclose(outs[1])
    model, _ = build_defender(arch, seed=0)
    dp_sgd_step(model, images, labels, sigma_dp=0.1, clip_norm=None,
                lr=0.01, seed=8)
    assert not outs[0].allclose(ModelParameters.from_module(model))


def test_dp_sgd_clip_bounds_update(arch, batch):
    images, labels = batch
    deltas = {}
    for clip in (None, 1e-3):
        model, init = build_defender(arch, seed=0)
        dp_sgd_step(model, images, labels, sigma_dp=0.0, clip_norm=clip,
                    lr=1.0, seed=0)
        # update norm over parameters only; buffers are not gradient updates
        with torch.no_grad():
            sq = sum(((p - init[n]) ** 2).sum()
                     for n, p in model.named_parameters())
            deltas[clip] = float(torch.sqrt(sq))
    assert deltas[1e-3] <= 1e-3 + 1e-6
    assert deltas[None] > deltas[1e-3]


def test_bido_rejects_small_batch(arch, batch):
    model, _ = build_defender(arch, seed=0)
    strat = make_strategy(model, DefenseConfig(kind="bido"), seed=0)
    images, labels = batch
    with pytest.raises(ValueError, match=">= 4"):
        strat.step(images[:3], labels[:3])


def test_bido_components_recombine(arch, batch):
    model, _ = build_defender(arch, seed=0)
    cfg = DefenseConfig(kind="bido", lambda_x=0.5, lambda_y=2.0)
    strat = make_strategy(model, cfg, seed=0)
    images, labels = batch
    lv = strat.step(images, labels)
    combined = float(lv.components["ce"] + 0.5 * lv.components["hsic_x"]
                     - 2.0 * lv.components["hsic_y"])
    assert lv.item() == pytest.approx(combined, rel=1e-6)


def test_bido_zero_lambdas_match_plain_ce(arch, batch):
    images, labels = batch
    model_a, _ = build_defender(arch, seed=0)
    strat_a = make_strategy(
        model_a, DefenseConfig(kind="bido", lambda_x=0.0, lambda_y=0.0, lr=1e-3),
        seed=0,
    )
    strat_a.step(images, labels)

    model_b, _ = build_defender(arch, seed=0)
    strat_b = make_strategy(
        model_b, DefenseConfig(kind="none", optimizer="adam", lr=1e-3), seed=0
    )
    strat_b.step(images, labels)
    assert ModelParameters.from_module(model_a).allclose(
        ModelParameters.from_module(model_b), atol=1e-7)


# -- Noise pretraining --------------------------------------------------------

def _learnable_defender(arch, seed=0):
    noise = NoiseSpec("learnable", 1.0, 0.1, latent_shape=arch.latent_shape)
    model, _ = build_defender(arch, seed=seed, noise=noise)
    return model


def test_pretrain_requires_learnable(arch):
    split = make_synthetic(16, (3, 16, 16), num_classes=4, seed=0)
    model, _ = build_defender(arch, seed=0, noise=NoiseSpec("fixed", 1.0, 0.1))
    with pytest.raises(ValueError, match="learnable"):
        pretrain_noise(model, split, epochs=1, alpha=1.0, lr=1e-3, seed=0)


def test_pretrain_zero_epochs_keeps_init(arch):
    split = make_synthetic(16, (3, 16, 16), num_classes=4, seed=0)
    spec, log = pretrain_noise(_learnable_defender(arch), split, epochs=0,
                               alpha=1.0, lr=1e-3, seed=0)
    m = int(torch.tensor(arch.latent_shape).prod())
    assert torch.equal(spec.mu, torch.ones(m))
    assert torch.allclose(spec.sigma, torch.full((m,), 0.1), atol=1e-6)
    assert log.rows == []


def test_pretrain_deterministic_and_learns(arch):
    split = make_synthetic(32, (3, 16, 16), num_classes=4, seed=0)
    spec1, log1 = pretrain_noise(_learnable_defender(arch), split, epochs=2,
                                 alpha=1.0, lr=1e-3, seed=5, batch_size=16)
    spec2, _ = pretrain_noise(_learnable_defender(arch), split, epochs=2,
                              alpha=1.0, lr=1e-3, seed=5, batch_size=16)
    assert torch.equal(spec1.mu, spec2.mu)
    assert torch.equal(spec1.rho, spec2.rho)
    assert len(log1.rows) == 2
    m = int(torch.tensor(arch.latent_shape).prod())
    assert not torch.equal(spec1.mu, torch.ones(m))  # noise actually trained
    assert not any(p.requires_grad for p in spec1.parameters())


def test_pretrain_log_csv(tmp_path):
    log = PretrainLog()
    log.append(0, 0.5, 1.25, 0.3)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_l_decoder,mean_l_predictor,mean_abs_r"
    assert lines[1] == "0,0.5,1.25,0.3"
