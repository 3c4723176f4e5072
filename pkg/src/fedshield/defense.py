"""Client-side training strategies: the latent-noise minimax defense,
its noise pretraining loop, and the DP-SGD / bilateral-dependency baselines.

All strategies expose the same step(images, labels) -> LossValue surface and
never change parameter shapes, so the federation loop treats them uniformly.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import DatasetSplit, batch_iter
from .models import DefenderModel, NoiseSpec  # noqa: F401  (re-exported)
from .objectives import LossValue, cross_entropy, decoder_loss, hsic, predictor_loss
from .rng import derive_seed, generator

KINDS = ("none", "proposed_fixed", "proposed_learnable", "dp_sgd", "bido")


@dataclass
class DefenseConfig:
    """Which defense a client runs and its knobs.

    Only the fields relevant to `kind` are consulted. optimizer=None picks
    the per-kind default: SGD for dp_sgd (the baseline is defined over SGD)
    and for none (a plain-SGD victim makes the one-step weight update an
    exact gradient, the worst case for leakage), Adam otherwise.
    """

    kind: str = "none"
    alpha: float = 1.0
    lr: float = 1e-3
    optimizer: str = None
    # proposed defense
    mu0: float = 1.0
    sigma0: float = 0.1
    first_step: str = "full"  # or "decoder": restrict step 1 to decoder params
    noise_eval: str = "sampled"  # evaluation-time noise mode for proposed kinds
    noise_file: str = None
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 128
    # dp_sgd
    sigma_dp: float = 0.0
    clip_norm: float = None
    # bido
    lambda_x: float = 0.1
    lambda_y: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.sigma_dp < 0:
            raise ValueError("sigma_dp must be >= 0")
        if self.lambda_x < 0 or self.lambda_y < 0:
            raise ValueError("bido lambdas must be >= 0")
        if self.first_step not in ("full", "decoder"):
            raise ValueError("first_step must be 'full' or 'decoder'")
        if self.noise_eval not in ("sampled", "off"):
            raise ValueError("noise_eval must be 'sampled' or 'off'")
        if self.optimizer not in (None, "sgd", "adam"):
            raise ValueError("optimizer must be sgd, adam or unset")

    @property
    def resolved_optimizer(self) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return "sgd" if self.kind in ("dp_sgd", "none") else "adam"

    @property
    def uses_noise(self) -> bool:
        return self.kind in ("proposed_fixed", "proposed_learnable")

    def eval_noise_mode(self) -> str:
        return self.noise_eval if self.uses_noise else "off"

    def hyperparameter_label(self) -> str:
        """The swept knob's value, for the metrics CSV."""
        if self.kind == "proposed_fixed":
            return repr(self.mu0)
        if self.kind == "proposed_learnable":
            return "learned"
        if self.kind == "dp_sgd":
            return repr(self.sigma_dp)
        if self.kind == "bido":
            return f"{self.lambda_x!r},{self.lambda_y!r}"
        return "-"


def _make_optimizer(name: str, params, lr: float):
    params = [p for p in params if p.requires_grad]
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def _check_finite(loss: torch.Tensor, context: str):
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss in {context}: {float(loss)!r}")


class ClientStrategy:
    """Owns one model and one optimizer; one strategy instance per client."""

    kind = None

    def __init__(self, model: DefenderModel, cfg: DefenseConfig, seed: int):
        self.model = model
        self.cfg = cfg
        self.gen = generator(derive_seed("strategy", cfg.kind, seed))
        self.optimizer = _make_optimizer(
            cfg.resolved_optimizer, model.parameters(), cfg.lr
        )

    @property
    def lr(self) -> float:
        return self.cfg.lr

    def step(self, images, labels) -> LossValue:
        raise NotImplementedError


class NoDefense(ClientStrategy):
    kind = "none"

    def step(self, images, labels) -> LossValue:
        out = self.model(images, noise_mode="off", with_reconstruction=False)
        ce = cross_entropy(labels, out.logits)
        _check_finite(ce, "no-defense step")
        self.optimizer.zero_grad()
        ce.backward()
        self.optimizer.step()
        return LossValue(ce.detach(), {"ce": ce.detach()})


class ProposedStrategy(ClientStrategy):
    """Two sequential updates per batch: the decoder objective, then the
    correlation-penalized classification objective, each over the full
    trainable set. Noise parameters stay frozen during federated training
    (they were learned in pretraining or fixed by config)."""

    kind = "proposed"

    def __init__(self, model, cfg, seed):
        for p in model.noise.parameters():
            p.requires_grad_(False)
        super().__init__(model, cfg, seed)

    def _restrict_first_step_grads(self):
        if self.cfg.first_step != "decoder":
            return
        for name, p in self.model.named_parameters():
            if not name.startswith("decoder."):
                p.grad = None

    def step(self, images, labels) -> LossValue:
        out = self.model(images, noise_mode="sampled", gen=self.gen)
        l_dec = decoder_loss(images, out.reconstruction)
        _check_finite(l_dec, "decoder update")
        self.optimizer.zero_grad()
        l_dec.backward()
        self._restrict_first_step_grads()
        self.optimizer.step()

        out = self.model(images, noise_mode="sampled", gen=self.gen)
        lv = predictor_loss(labels, out.logits, images, out.reconstruction,
                            self.cfg.alpha)
        _check_finite(lv.value, "predictor update")
        self.optimizer.zero_grad()
        lv.value.backward()
        self.optimizer.step()
        components = {"decoder": l_dec.detach(), **lv.components}
        return LossValue(lv.value.detach(), components)


class DpSgdStrategy(ClientStrategy):
    """Cross-entropy gradient, optional global-norm clip, elementwise
    Gaussian noise, plain SGD step."""

    kind = "dp_sgd"

    def step(self, images, labels) -> LossValue:
        out = self.model(images, noise_mode="off", with_reconstruction=False)
        ce = cross_entropy(labels, out.logits)
        _check_finite(ce, "dp-sgd step")
        self.optimizer.zero_grad()
        ce.backward()
        grads = [p.grad for p in self.model.parameters() if p.grad is not None]
        if self.cfg.clip_norm is not None:
            total = torch.sqrt(sum((g * g).sum() for g in grads))
            if total > self.cfg.clip_norm:
                scale = self.cfg.clip_norm / total
                for g in grads:
                    g.mul_(scale)
        if self.cfg.sigma_dp > 0:
            for g in grads:
                g.add_(self.cfg.sigma_dp
                       * torch.randn(g.shape, generator=self.gen))
        self.optimizer.step()
        return LossValue(ce.detach(), {"ce": ce.detach()})


class BidoStrategy(ClientStrategy):
    """Single update on l = ce + lambda_x * hsic(latent, input)
    - lambda_y * hsic(latent, one-hot labels); latent is the flattened
    pre-noise encoder output."""

    kind = "bido"

    def step(self, images, labels) -> LossValue:
        if images.shape[0] < 4:
            raise ValueError("bido needs batch size >= 4 for the HSIC estimator")
        out = self.model(images, noise_mode="off", with_reconstruction=False)
        ce = cross_entropy(labels, out.logits)
        latent = out.latent.reshape(images.shape[0], -1)
        onehot = F.one_hot(labels, self.model.arch.num_classes).to(latent.dtype)
        hx = hsic(latent, images)
        hy = hsic(latent, onehot)
        loss = ce + self.cfg.lambda_x * hx - self.cfg.lambda_y * hy
        _check_finite(loss, "bido step")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return LossValue(
            loss.detach(),
            {"ce": ce.detach(), "hsic_x": hx.detach(), "hsic_y": hy.detach()},
        )


_STRATEGIES = {
    "none": NoDefense,
    "proposed_fixed": ProposedStrategy,
    "proposed_learnable": ProposedStrategy,
    "dp_sgd": DpSgdStrategy,
    "bido": BidoStrategy,
}


def make_strategy(model: DefenderModel, cfg: DefenseConfig, seed: int) -> ClientStrategy:
    return _STRATEGIES[cfg.kind](model, cfg, seed)


def dp_sgd_step(model, images, labels, sigma_dp, clip_norm, lr, seed) -> LossValue:
    """One-shot functional form of the DP-SGD update (fresh RNG from seed)."""
    cfg = DefenseConfig(kind="dp_sgd", lr=lr, sigma_dp=sigma_dp, clip_norm=clip_norm)
    strat = DpSgdStrategy(model, cfg, seed=0)
    strat.gen = generator(seed)
    return strat.step(images, labels)


# ---------------------------------------------------------------------------
# Noise pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainLog:
    rows: list = field(default_factory=list)

    HEADER = ("epoch", "mean_l_decoder", "mean_l_predictor", "mean_abs_r")

    def append(self, epoch, l_dec, l_pred, abs_r):
        self.rows.append({
            "epoch": epoch,
            "mean_l_decoder": l_dec,
            "mean_l_predictor": l_pred,
            "mean_abs_r": abs_r,
        })

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(self.HEADER) + "\n")
            for row in self.rows:
                f.write(",".join(repr(row[k]) if isinstance(row[k], float)
                                 else str(row[k]) for k in self.HEADER) + "\n")


def pretrain_noise(defender: DefenderModel, split: DatasetSplit, epochs: int,
                   alpha: float, lr: float, seed: int, batch_size: int = 128,
                   first_step: str = "full") -> tuple:
    """Learn the noise distribution parameters (two-update loop per batch).

    Per batch: (1) one gradient step on the decoder objective over the full
    parameter set including the noise parameters, then (2) a second full
    step on the correlation-penalized classification objective. Returns the
    learned NoiseSpec (a detached copy; the model weights are meant to be
    discarded and re-initialized for federated training) and a PretrainLog.
    """
    if defender.noise.mode != "learnable":
        raise ValueError("pretraining requires a learnable noise spec")
    for p in defender.noise.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam([p for p in defender.parameters() if p.requires_grad],
                           lr=lr)
    noise_gen = generator(derive_seed("pretrain-noise", seed))
    log = PretrainLog()
    batch_size = min(batch_size, len(split))
    for epoch in range(epochs):
        sums = {"dec": 0.0, "pred": 0.0, "r": 0.0}
        count = 0
        for bi, (images, labels) in enumerate(
            batch_iter(split, batch_size, derive_seed("pretrain-batches", seed),
                       epoch=epoch)
        ):
            out = defender(images, noise_mode="sampled", gen=noise_gen)
            l_dec = decoder_loss(images, out.reconstruction)
            if not torch.isfinite(l_dec):
                raise RuntimeError(
                    f"non-finite decoder loss at epoch {epoch} batch {bi}"
                )
            opt.zero_grad()
            l_dec.backward()
            if first_step == "decoder":
                for name, p in defender.named_parameters():
                    if not name.startswith("decoder."):
                        p.grad = None
            opt.step()

            out = defender(images, noise_mode="sampled", gen=noise_gen)
            lv = predictor_loss(labels, out.logits, images, out.reconstruction,
                                alpha)
            if not torch.isfinite(lv.value):
                raise RuntimeError(
                    f"non-finite predictor loss at epoch {epoch} batch {bi}"
                )
            opt.zero_grad()
            lv.value.backward()
            opt.step()

            sums["dec"] += float(l_dec.detach())
            sums["pred"] += float(lv.value.detach())
            sums["r"] += float(lv.components["corr"].detach())
            count += 1
        log.append(epoch, sums["dec"] / count, sums["pred"] / count,
                   sums["r"] / count)
    spec = NoiseSpec.from_snapshot(defender.noise.snapshot())
    for p in spec.parameters():
        p.requires_grad_(False)
    return spec, log
