"""Fidelity and utility metrics, plus the reconstructed-image probe.

MSE/PSNR are computed in normalized-tensor space (the reconstruction error
scale the sweeps report) with max_val taken from the observed range of the
reference batch; pixel-space [0,1] values are logged alongside for
portability.
"""

from dataclasses import dataclass

import torch
from sklearn.metrics import f1_score

from .data import DatasetSplit
from .rng import derive_seed, generator

PSNR_CAP_DB = 100.0


def mse(x: torch.Tensor, y: torch.Tensor) -> float:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return float(((x - y) ** 2).mean())


def psnr(x: torch.Tensor, y: torch.Tensor, max_val: float) -> float:
    """10 * log10(max_val^2 / mse); identical images cap at 100 dB."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(x, y)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * torch.log10(torch.tensor(max_val ** 2 / err, dtype=torch.float64)))


def predictions(model, split: DatasetSplit, noise_mode: str = "off",
                batch_size: int = 256, seed: int = 0, limit: int = None) -> tuple:
    """Model predictions over a split (deterministic order, no shuffling)."""
    if len(split) == 0:
        raise ValueError("empty split")
    images, labels = split.images, split.labels
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    gen = generator(derive_seed("eval-noise", seed))
    preds = []
    was_training = getattr(model, "training", False)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            if hasattr(model, "noise"):
                out = model(x, noise_mode=noise_mode, gen=gen, with_reconstruction=False)
                logits = out.logits
            else:
                logits = model(x)
            preds.append(logits.argmax(dim=1))
    if was_training:
        model.train()
    return torch.cat(preds), labels


def accuracy(model, split: DatasetSplit, noise_mode: str = "off",
             batch_size: int = 256, seed: int = 0, limit: int = None) -> float:
    preds, labels = predictions(model, split, noise_mode, batch_size, seed, limit)
    return float((preds == labels).float().mean())


def f1_macro(preds: torch.Tensor, labels: torch.Tensor) -> float:
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must align")
    return float(f1_score(labels.numpy(), preds.numpy(), average="macro",
                          zero_division=0))


def probe_reconstructions(recon_images: torch.Tensor, clean_model,
                          true_labels: torch.Tensor,
                          noise_mode: str = "off") -> float:
    """Accuracy of a defense-free trained model on matched reconstructions.

    Quantized to multiples of 1/B by construction. The reconstructions must
    already be matched to the victim batch's label order.
    """
    true_labels = torch.as_tensor(true_labels, dtype=torch.long)
    if recon_images.shape[0] != true_labels.shape[0]:
        raise ValueError("reconstruction batch does not match label count")
    was_training = getattr(clean_model, "training", False)
    clean_model.eval()
    with torch.no_grad():
        if hasattr(clean_model, "noise"):
            logits = clean_model(recon_images, noise_mode=noise_mode, with_reconstruction=False).logits
        else:
            logits = clean_model(recon_images)
    if was_training:
        clean_model.train()
    preds = logits.argmax(dim=1)
    return float((preds == true_labels).float().mean())


@dataclass
class ReconReport:
    per_image: list  # (mse_norm, psnr_norm_db) per matched reference image
    batch_mean_mse: float
    batch_mean_psnr_db: float
    mse_px: float
    psnr_px_db: float
    recon_classification_accuracy: float = None


def make_recon_report(recon: torch.Tensor, reference: torch.Tensor,
                      matched_indices: list, stats=None, clean_model=None,
                      true_labels=None) -> ReconReport:
    """Per-image and batch reconstruction fidelity on matched pairs.

    Normalized-space PSNR uses the reference batch's observed value range;
    pixel-space metrics denormalize through stats and clamp to [0,1].
    """
    b = reference.shape[0]
    ordered = recon[torch.as_tensor(matched_indices, dtype=torch.long)]
    max_norm = float(reference.max() - reference.min())
    if max_norm <= 0:
        max_norm = 1.0
    per_image = [
        (mse(ordered[i], reference[i]), psnr(ordered[i], reference[i], max_norm))
        for i in range(b)
    ]
    mean_mse = mse(ordered, reference)
    mean_psnr = psnr(ordered, reference, max_norm)
    if stats is not None:
        rec_px = stats.denormalize(ordered).clamp(0.0, 1.0)
        ref_px = stats.denormalize(reference).clamp(0.0, 1.0)
        mse_px = mse(rec_px, ref_px)
        psnr_px = psnr(rec_px, ref_px, 1.0)
    else:
        mse_px = mean_mse
        psnr_px = mean_psnr
    probe = None
    if clean_model is not None and true_labels is not None:
        probe = probe_reconstructions(ordered, clean_model, true_labels)
    return ReconReport(
        per_image=per_image,
        batch_mean_mse=mean_mse,
        batch_mean_psnr_db=mean_psnr,
        mse_px=mse_px,
        psnr_px_db=psnr_px,
        recon_classification_accuracy=probe,
    )
