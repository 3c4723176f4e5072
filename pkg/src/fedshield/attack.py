"""White-box gradient inversion of an observed weight update.

The attacker treats the negated, lr-normalized weight delta as a gradient
surrogate and optimizes dummy pixels so the surrogate model's cross-entropy
gradient matches it in cosine distance, with a total-variation prior.
Optimization uses sign-of-gradient adaptive steps with step decay at 3/8,
5/8 and 7/8 of the budget; the best iterate per restart (by objective) is
kept, and the best restart wins.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .objectives import cosine_grad_distance, total_variation
from .rng import derive_seed, generator


@dataclass
class AttackConfig:
    iterations: int = 4000
    lr: float = 1.0
    tv_weight: float = 1e-3
    restarts: int = 1
    init: str = "gaussian"  # or "uniform"
    label_mode: str = "known"  # or "inferred"
    batch_size: int = 8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init not in ("gaussian", "uniform"):
            raise ValueError("init must be gaussian or uniform")
        if self.label_mode not in ("known", "inferred"):
            raise ValueError("label_mode must be known or inferred")


@dataclass
class PseudoGrad:
    grads: OrderedDict  # name -> tensor
    degenerate: bool  # all-zero observed delta


def pseudo_gradient(update) -> PseudoGrad:
    """g = -delta / client_lr.

    For a single plain-SGD step on one batch this recovers the true batch
    gradient exactly; for multi-epoch updates it is a direction-preserving
    surrogate (the cosine objective ignores scale regardless).
    """
    if update.client_lr <= 0:
        raise ValueError("client_lr must be positive")
    grads = OrderedDict(
        (name, -d / update.client_lr) for name, d in update.deltas.items()
    )
    degenerate = all(float(g.abs().max()) == 0.0 for g in grads.values())
    return PseudoGrad(grads, degenerate)


@dataclass
class InferredLabels:
    labels: list
    ambiguous: bool


def infer_labels(update, num_classes: int = None) -> InferredLabels:
    """Predict the victim batch's labels from the final linear layer.

    The latent feeding the classification head is non-negative (ReLU and
    max-pool outputs), so a present label makes its weight-gradient row
    negative. Rows whose pseudo-gradient sums are negative are predicted
    present once each; if fewer than batch_size rows qualify the multiset
    is ambiguous (repeated labels) and is padded with the most negative
    rows.
    """
    pg = pseudo_gradient(update)
    weight_name = None
    for name, g in pg.grads.items():
        if g.ndim == 2:
            weight_name = name  # last 2-D tensor wins (final linear weight)
    if weight_name is None:
        raise ValueError("update contains no linear-layer weight gradient")
    rows = pg.grads[weight_name]
    row_sums = rows.sum(dim=1)
    if pg.degenerate:
        return InferredLabels([], ambiguous=True)
    present = [i for i in range(rows.shape[0]) if float(row_sums[i]) < 0]
    batch = update.batch_size
    ambiguous = batch > rows.shape[0] or len(present) != batch
    labels = sorted(present)
    if len(labels) > batch:
        labels = sorted(
            sorted(present, key=lambda i: float(row_sums[i]))[:batch]
        )
    while len(labels) < batch and present:
        labels.append(min(present, key=lambda i: float(row_sums[i])))
    return InferredLabels(sorted(labels[:batch]), ambiguous)


@dataclass
class ReconstructionResult:
    images: torch.Tensor  # [B, C, H, W], attacker ordering
    matched_indices: list  # reconstruction index assigned to each reference
    per_image: list  # (mse, psnr) per reference image, or None
    loss_trace: list
    best_restart: int
    final_objective: float
    degenerate: bool = False
    aborted_restarts: list = field(default_factory=list)


def match_reconstructions(recon: torch.Tensor, reference: torch.Tensor) -> list:
    """Greedy minimal-MSE bipartite assignment; batch order is not
    identifiable by the attack, so metrics are computed on matched pairs.

    Returns matched[i] = reconstruction index for reference i.
    """
    b = reference.shape[0]
    if recon.shape[0] != b:
        raise ValueError("batch size mismatch between reconstruction and reference")
    cost = torch.zeros(b, b)
    for i in range(b):
        cost[i] = ((recon - reference[i]) ** 2).reshape(b, -1).mean(dim=1)
    matched = [-1] * b
    used_refs, used_recs = set(), set()
    flat = [(float(cost[i, j]), i, j) for i in range(b) for j in range(b)]
    for _, i, j in sorted(flat):
        if i in used_refs or j in used_recs:
            continue
        matched[i] = j
        used_refs.add(i)
        used_recs.add(j)
    return matched


def _init_dummy(shape, mode, value_range, gen):
    lo, hi = value_range
    if mode == "uniform":
        return lo + (hi - lo) * torch.rand(shape, generator=gen)
    return torch.randn(shape, generator=gen)


def invert(update, surrogate, cfg: AttackConfig, seed: int, labels=None,
           value_range=(-3.0, 3.0), reference=None,
           input_shape=None) -> ReconstructionResult:
    """Reconstruct the victim batch behind a WeightUpdate.

    surrogate: a module holding the parameters named in the update (the
    attacker's copy of the shared model at the round start). labels:
    required for label_mode=known; inferred from the update otherwise.
    reference (optional): the true batch; enables matching and per-image
    metrics. value_range: clamp bounds in normalized units. input_shape
    defaults to the surrogate's architecture.
    """
    from .metrics import mse as mse_fn, psnr as psnr_fn

    pg = pseudo_gradient(update)
    named = dict(surrogate.named_parameters())
    missing = [n for n in pg.grads if n not in named]
    if missing:
        raise ValueError(f"surrogate lacks parameters {missing}")
    param_names = [n for n, _ in surrogate.named_parameters() if n in pg.grads]
    params = [named[n] for n in param_names]
    target = [pg.grads[n].detach() for n in param_names]

    if cfg.label_mode == "inferred":
        inferred = infer_labels(update)
        labels = torch.tensor(inferred.labels, dtype=torch.long)
    if labels is None:
        raise ValueError("label_mode=known requires labels")
    labels = torch.as_tensor(labels, dtype=torch.long)
    batch = labels.shape[0]
    if input_shape is None:
        if not hasattr(surrogate, "arch"):
            raise ValueError("input_shape required for surrogates without .arch")
        input_shape = surrogate.arch.input_shape
    shape = (batch, *input_shape)
    lo, hi = float(value_range[0]), float(value_range[1])

    surrogate.eval()
    for p in surrogate.parameters():
        p.requires_grad_(True)

    best = None  # (objective, restart, images, trace)
    aborted = []
    for restart in range(cfg.restarts):
        gen = generator(derive_seed("attack-init", seed, restart))
        dummy = _init_dummy(shape, cfg.init, (lo, hi), gen)
        dummy = dummy.clamp(lo, hi).requires_grad_()
        opt = torch.optim.Adam([dummy], lr=cfg.lr)
        milestones = [max(1, cfg.iterations * k // 8) for k in (3, 5, 7)]
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones,
                                                     gamma=0.1)
        trace = []
        r_best_obj = None
        r_best_img = dummy.detach().clone()
        failed = False
        for _ in range(cfg.iterations):
            opt.zero_grad()
            loss = F.cross_entropy(surrogate(dummy), labels)
            grads = torch.autograd.grad(loss, params, create_graph=True)
            objective = cosine_grad_distance(target, grads)
            if cfg.tv_weight > 0:
                objective = objective + cfg.tv_weight * total_variation(dummy)
            if not torch.isfinite(objective):
                failed = True
                break
            objective.backward()
            obj_val = float(objective.detach())
            trace.append(obj_val)
            if r_best_obj is None or obj_val < r_best_obj:
                r_best_obj = obj_val
                r_best_img = dummy.detach().clone()
            with torch.no_grad():
                dummy.grad.sign_()
            opt.step()
            sched.step()
            with torch.no_grad():
                dummy.clamp_(lo, hi)
        if failed:
            aborted.append(restart)
            continue
        if cfg.iterations == 0:
            r_best_obj = float("inf")
            r_best_img = dummy.detach().clone()
        if best is None or r_best_obj < best[0]:
            best = (r_best_obj, restart, r_best_img, trace)
    if best is None:
        raise RuntimeError(f"all {cfg.restarts} attack restarts diverged")

    obj, restart_idx, images, trace = best
    matched = list(range(batch))
    per_image = None
    if reference is not None:
        matched = match_reconstructions(images, reference)
        max_val = float(reference.max() - reference.min())
        per_image = []
        for i in range(batch):
            m = mse_fn(images[matched[i]], reference[i])
            per_image.append((m, psnr_fn(images[matched[i]], reference[i], max_val)))
    return ReconstructionResult(
        images=images,
        matched_indices=matched,
        per_image=per_image,
        loss_trace=trace,
        best_restart=restart_idx,
        final_objective=obj,
        degenerate=pg.degenerate,
        aborted_restarts=aborted,
    )
