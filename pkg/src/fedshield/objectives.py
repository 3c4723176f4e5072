"""Loss terms and statistical objectives.

Pearson-correlation defense losses, the attacker's gradient-matching
objective (cosine distance + total-variation prior), and the HSIC
dependency measure used by the bilateral-dependency baseline.
"""

from dataclasses import dataclass, field
from collections.abc import Mapping

import torch
import torch.nn.functional as F

# Denominator guard against constant images (black test images exist).
PEARSON_EPS = 1e-12


@dataclass
class LossValue:
    """A scalar loss with its named sub-terms.

    Invariant: value equals the documented combination of components
    (e.g. ce + alpha * corr) within 1e-9.
    """

    value: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self):
        return float(self.value)


def _per_image(x: torch.Tensor) -> torch.Tensor:
    """View a tensor as [B, elements]; tensors of ndim <= 1 are one sample."""
    if x.ndim <= 1:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def pearson_r(x: torch.Tensor, y: torch.Tensor, reduce: str = "mean"):
    """Pearson correlation coefficient between x and y.

    Computed per sample over each image's elements, then averaged across
    the batch (reduce="mean"). reduce="none" returns the [B] vector;
    reduce="flat" treats the whole batch as one sample (ablation variant).
    Constant inputs have undefined correlation; those entries are defined
    as 0 (guard eps 1e-12 in the denominator).
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.numel() < 2:
        raise ValueError("pearson_r needs at least 2 elements")
    if reduce == "flat":
        xf = x.reshape(1, -1)
        yf = y.reshape(1, -1)
    else:
        xf = _per_image(x)
        yf = _per_image(y)
    xc = xf - xf.mean(dim=1, keepdim=True)
    yc = yf - yf.mean(dim=1, keepdim=True)
    num = (xc * yc).sum(dim=1)
    nx = xc.norm(dim=1)
    ny = yc.norm(dim=1)
    r = num / torch.clamp(nx * ny, min=PEARSON_EPS)
    degenerate = (nx < PEARSON_EPS) | (ny < PEARSON_EPS)
    r = torch.where(degenerate, torch.zeros_like(r), r)
    r = r.clamp(-1.0, 1.0)
    if reduce == "none":
        return r
    if reduce in ("mean", "flat"):
        return r.mean()
    raise ValueError(f"unknown reduce mode {reduce!r}")


def pearson_degenerate(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Boolean [B] mask of image pairs whose correlation was defined as 0."""
    xf = _per_image(x)
    yf = _per_image(y)
    nx = (xf - xf.mean(dim=1, keepdim=True)).norm(dim=1)
    ny = (yf - yf.mean(dim=1, keepdim=True)).norm(dim=1)
    return (nx < PEARSON_EPS) | (ny < PEARSON_EPS)


def decoder_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Reconstruction objective for the decoder: mean over images of 1 - |r|.

    Range [0, 1]; minimized when reconstructions correlate (or
    anti-correlate) perfectly with the private inputs.
    """
    r = pearson_r(x, x_rec, reduce="none")
    return (1.0 - r.abs()).mean()


def cross_entropy(y: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Mean over batch of -log softmax(logits)[y]."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    k = logits.shape[-1]
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= k):
        raise ValueError(f"label outside [0, {k})")
    return F.cross_entropy(logits, y)


def predictor_loss(
    y: torch.Tensor,
    logits: torch.Tensor,
    x: torch.Tensor,
    x_rec: torch.Tensor,
    alpha: float = 1.0,
) -> LossValue:
    """Classification objective penalized by reconstructability.

    value = ce + alpha * corr, where corr is the per-image-averaged |r|
    between inputs and reconstructions.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    ce = cross_entropy(y, logits)
    corr = pearson_r(x, x_rec, reduce="none").abs().mean()
    return LossValue(
        value=ce + alpha * corr,
        components={"ce": ce.detach(), "corr": corr.detach()},
    )


def total_variation(img: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean |horizontal diffs| + mean |vertical diffs|.

    Mean (not sum) reduction keeps the weight resolution-independent.
    """
    if img.shape[-1] < 2 or img.shape[-2] < 2:
        raise ValueError("total_variation needs H, W >= 2")
    dx = (img[..., :, 1:] - img[..., :, :-1]).abs().mean()
    dy = (img[..., 1:, :] - img[..., :-1, :]).abs().mean()
    return dx + dy


def _aligned_pairs(g1, g2):
    if isinstance(g1, Mapping) and isinstance(g2, Mapping):
        if set(g1.keys()) != set(g2.keys()):
            raise ValueError("gradient maps have different name sets")
        return [(g1[k], g2[k]) for k in sorted(g1.keys())]
    g1 = list(g1)
    g2 = list(g2)
    if len(g1) != len(g2):
        raise ValueError("gradient lists differ in length")
    return list(zip(g1, g2))


def cosine_grad_distance(g1, g2, with_flag: bool = False):
    """1 - cosine similarity over the concatenation of all tensors.

    g1, g2: named maps or aligned sequences of tensors. Range [0, 2].
    A zero-norm side makes the similarity undefined; it is defined as 0
    (distance 1) and flagged degenerate.
    """
    pairs = _aligned_pairs(g1, g2)
    dot = None
    sq_a = None
    sq_b = None
    for ta, tb in pairs:
        if ta.shape != tb.shape:
            raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
        d = (ta * tb).sum()
        a2 = (ta * ta).sum()
        b2 = (tb * tb).sum()
        dot = d if dot is None else dot + d
        sq_a = a2 if sq_a is None else sq_a + a2
        sq_b = b2 if sq_b is None else sq_b + b2
    if dot is None:
        raise ValueError("empty gradient collection")
    norm = sq_a.sqrt() * sq_b.sqrt()
    degenerate = float(norm.detach()) == 0.0
    if degenerate:
        dist = torch.ones(()) + 0.0 * dot  # preserves the autograd graph
    else:
        dist = 1.0 - dot / norm
    if with_flag:
        return dist, degenerate
    return dist


# ---------------------------------------------------------------------------
# HSIC (bilateral-dependency baseline)
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(a: torch.Tensor) -> torch.Tensor:
    flat = a.reshape(a.shape[0], -1)
    sq = (flat * flat).sum(dim=1)
    d2 = sq.unsqueeze(0) + sq.unsqueeze(1) - 2.0 * flat @ flat.t()
    return d2.clamp(min=0.0)


def median_bandwidth(a: torch.Tensor) -> float:
    """Median of pairwise squared distances (off-diagonal, nonzero).

    Falls back to 1.0 when all points coincide, so that a constant input
    yields an all-ones kernel rather than a division by zero.
    """
    d2 = _pairwise_sq_dists(a)
    b = d2.shape[0]
    off = d2[~torch.eye(b, dtype=torch.bool)]
    off = off[off > 0]
    if off.numel() == 0:
        return 1.0
    return float(off.median())


def gaussian_kernel(a: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """K_ij = exp(-||a_i - a_j||^2 / (2 * bandwidth)) over flattened rows."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    d2 = _pairwise_sq_dists(a)
    return torch.exp(-d2 / (2.0 * bandwidth))


def hsic(a: torch.Tensor, b: torch.Tensor, bandwidth: float = None) -> torch.Tensor:
    """Biased HSIC estimate tr(K H L H) / (B-1)^2 with Gaussian kernels.

    a, b: [B, ...] batches sharing the leading dimension. bandwidth applies
    to both kernels when given; otherwise each kernel uses the median
    heuristic on its own (detached) input. Requires B >= 4.
    """
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("batch size mismatch")
    if n < 4:
        raise ValueError(f"hsic needs batch size >= 4, got {n}")
    if bandwidth is not None and bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    bw_a = bandwidth if bandwidth is not None else median_bandwidth(a.detach())
    bw_b = bandwidth if bandwidth is not None else median_bandwidth(b.detach())
    k = gaussian_kernel(a, bw_a)
    l = gaussian_kernel(b, bw_b)
    h = torch.eye(n, dtype=k.dtype) - torch.full((n, n), 1.0 / n, dtype=k.dtype)
    return torch.trace(k @ h @ l @ h) / float((n - 1) ** 2)
