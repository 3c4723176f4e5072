"""Command-line entry point: pretrain, run, sweep, plot.

All floating-point CSV cells are written with repr() so identical runs
produce byte-identical files; wall-clock information goes only to run.log,
which is outside the determinism surface.
"""

import argparse
import os
import sys
import time
from dataclasses import replace

import torch

from . import archive
from .attack import invert
from .config import (ConfigError, ExperimentConfig, config_from_dict,
                     load_config, load_datasets)
from .defense import DefenseConfig, pretrain_noise
from .federation import centralized_training, run_federation
from .metrics import f1_macro, make_recon_report, predictions
from .models import (ArchitectureConfig, ModelParameters, NoiseSpec,
                     SharedClassifier, build_defender)
from .plots import PlotError, plot_mse_vs_accuracy
from .rng import derive_seed

METRICS_HEADER = (
    "dataset", "defense", "hyperparameter", "seed", "client_acc", "f1",
    "recon_mse_norm", "recon_mse_px", "recon_psnr_db", "probe_acc",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows):
    with open(path, "w") as f:
        f.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[k]) for k in METRICS_HEADER) + "\n")


class RunLogger:
    """Timestamped plain-text progress log (not reproduced bitwise)."""

    def __init__(self, path):
        self.path = path

    def log(self, msg):
        stamp = time.strftime("%Y-%m-%d %H:%M:%S")
        with open(self.path, "a") as f:
            f.write(f"[{stamp}] {msg}\n")


def _build_arch(cfg: ExperimentConfig, datasets) -> ArchitectureConfig:
    train = datasets["train"]
    return ArchitectureConfig(
        input_shape=train.image_shape,
        num_classes=train.num_classes,
        final_deconv_kernel=cfg.final_deconv_kernel,
    )


def _pretrain(cfg: ExperimentConfig, arch, datasets, out_dir, logger):
    d = cfg.defense
    defender, _ = build_defender(
        arch, derive_seed("pretrain-model", cfg.seed),
        noise=NoiseSpec("learnable", d.mu0, d.sigma0, arch.latent_shape),
    )
    logger.log(f"pretraining noise for {d.pretrain_epochs} epochs")
    spec, plog = pretrain_noise(
        defender, datasets["train"], d.pretrain_epochs, d.alpha, d.pretrain_lr,
        derive_seed("pretrain", cfg.seed), d.pretrain_batch_size, d.first_step,
    )
    plog.to_csv(os.path.join(out_dir, "pretrain_log.csv"))
    archive.write_noise(os.path.join(out_dir, "noise.zip"), spec,
                        {"seed": cfg.seed})
    return spec


def _prepare_noise(cfg: ExperimentConfig, arch, datasets, out_dir, logger):
    d = cfg.defense
    if d.kind == "proposed_fixed":
        return NoiseSpec("fixed", d.mu0, d.sigma0)
    if d.kind != "proposed_learnable":
        return None
    if d.noise_file:
        spec, _ = archive.read_noise(d.noise_file)
        if spec.mode != "learnable" or tuple(spec.latent_shape) != arch.latent_shape:
            raise ConfigError(
                f"defense.noise_file: latent shape {spec.latent_shape} does not "
                f"match the architecture's {arch.latent_shape}"
            )
        return spec
    return _pretrain(cfg, arch, datasets, out_dir, logger)


def cmd_pretrain(cfg: ExperimentConfig) -> str:
    if cfg.defense.kind != "proposed_learnable":
        raise ConfigError(
            "defense.kind: the pretrain command requires proposed_learnable, "
            f"got {cfg.defense.kind!r}"
        )
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    logger = RunLogger(os.path.join(out_dir, "run.log"))
    cfg.dump(os.path.join(out_dir, "resolved_config.yaml"))
    datasets = load_datasets(cfg.dataset, cfg.seed)
    arch = _build_arch(cfg, datasets)
    _pretrain(cfg, arch, datasets, out_dir, logger)
    logger.log("pretrain complete")
    return os.path.join(out_dir, "noise.zip")


def cmd_run(cfg: ExperimentConfig) -> dict:
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    logger = RunLogger(os.path.join(out_dir, "run.log"))
    cfg.dump(os.path.join(out_dir, "resolved_config.yaml"))
    logger.log(f"run start: defense={cfg.defense.kind} seed={cfg.seed}")

    if cfg.federation.attack_round is None:
        raise ConfigError("federation.attack_round: the run command inverts "
                          "the attacked round and requires one")
    datasets = load_datasets(cfg.dataset, cfg.seed)
    arch = _build_arch(cfg, datasets)
    noise = _prepare_noise(cfg, arch, datasets, out_dir, logger)

    fed = replace(
        cfg.federation,
        seed=derive_seed("federation", cfg.seed),
        attacked_victim_batch=cfg.attack.batch_size,
    )
    logger.log(f"federation: {fed.num_clients} clients, {fed.rounds} rounds")
    result = run_federation(
        fed, cfg.defense, arch, datasets, noise=noise,
        eval_every=cfg.eval.eval_every, eval_limit=cfg.eval.limit or 256,
    )
    result.log.to_csv(os.path.join(out_dir, "training_log.csv"))
    archive.write_params(
        os.path.join(out_dir, "model.zip"),
        ModelParameters.from_module(result.global_model),
        {"seed": cfg.seed, "defense": cfg.defense.kind},
    )
    if cfg.eval.save_updates != "none":
        for idx, update in enumerate(result.victim_updates, start=1):
            if cfg.eval.save_updates == "attacked" and idx != fed.attack_round:
                continue
            archive.write_archive(
                os.path.join(out_dir, f"update_round{idx:04d}.zip"),
                dict(update.deltas),
                {
                    "round": update.round,
                    "client": update.client_id,
                    "local_epochs": update.local_epochs,
                    "batch_size": update.batch_size,
                    "client_lr": update.client_lr,
                },
            )

    # Inversion of the attacked round's victim update.
    update = result.victim_updates[fed.attack_round - 1]
    surrogate = SharedClassifier(arch)
    result.attack_round_start.load_into(surrogate)
    ref_images, ref_labels = result.victim_batch
    logger.log(f"attacking round {fed.attack_round} update "
               f"({cfg.attack.iterations} iterations)")
    recon = invert(
        update, surrogate, cfg.attack, derive_seed("attack", cfg.seed),
        labels=ref_labels if cfg.attack.label_mode == "known" else None,
        value_range=datasets["train"].stats.value_range,
        reference=ref_images,
    )
    with open(os.path.join(out_dir, "attack_trace.csv"), "w") as f:
        f.write("iteration,objective\n")
        for i, obj in enumerate(recon.loss_trace):
            f.write(f"{i},{obj!r}\n")
    matched = recon.images[torch.as_tensor(recon.matched_indices)]
    archive.write_archive(
        os.path.join(out_dir, "reconstruction.zip"),
        {"reconstruction": matched, "reference": ref_images,
         "labels": ref_labels},
        {"matched_indices": recon.matched_indices,
         "final_objective": recon.final_objective,
         "best_restart": recon.best_restart},
    )
    stats = datasets["train"].stats
    archive.save_image_grid(os.path.join(out_dir, "recon_grid.png"),
                            matched, stats)
    archive.save_image_grid(os.path.join(out_dir, "reference_grid.png"),
                            ref_images, stats)

    # Clean probe model (no defense) for the semantic-leakage probe.
    logger.log("training clean probe model")
    probe_model = centralized_training(
        arch,
        DefenseConfig(kind="none", optimizer="adam", lr=cfg.eval.probe_lr),
        datasets["train"], rounds=1, local_epochs=cfg.eval.probe_epochs,
        batch_size=cfg.eval.probe_batch_size,
        seed=derive_seed("probe", cfg.seed),
    )
    report = make_recon_report(
        recon.images, ref_images, recon.matched_indices, stats=stats,
        clean_model=probe_model, true_labels=ref_labels,
    )

    noise_mode = cfg.defense.eval_noise_mode()
    preds, labels = predictions(
        result.global_model, datasets["test"], noise_mode=noise_mode,
        batch_size=cfg.eval.batch_size, seed=derive_seed("final-eval", cfg.seed),
        limit=cfg.eval.limit,
    )
    client_acc = float((preds == labels).float().mean())
    f1 = f1_macro(preds, labels)

    row = {
        "dataset": cfg.dataset.kind,
        "defense": cfg.defense.kind,
        "hyperparameter": cfg.defense.hyperparameter_label(),
        "seed": cfg.seed,
        "client_acc": client_acc,
        "f1": f1,
        "recon_mse_norm": report.batch_mean_mse,
        "recon_mse_px": report.mse_px,
        "recon_psnr_db": report.batch_mean_psnr_db,
        "probe_acc": report.recon_classification_accuracy,
    }
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), [row])
    logger.log(f"run complete: acc={client_acc:.4f} "
               f"psnr={report.batch_mean_psnr_db:.2f} dB")
    return row


def _value_label(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(repr(v) for v in value)
    return repr(value)


def _sort_key(value):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return (float(value),)


def cmd_sweep(cfg: ExperimentConfig) -> list:
    if cfg.sweep is None:
        raise ConfigError("sweep: block required for the sweep command")
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    base = cfg.resolved_dict()
    base.pop("sweep", None)
    entries = []
    failures = []
    for value in cfg.sweep.values:
        label = _value_label(value)
        try:
            sub_cfg = config_from_dict(_assign(base, cfg.sweep.parameter, value))
            sub_cfg.output_dir = os.path.join(
                out_dir, f"{cfg.sweep.parameter}={label}".replace("/", "_")
            )
            row = cmd_run(sub_cfg)
            entries.append((_sort_key(value), row))
        except Exception as e:  # per-value failures recorded, sweep continues
            failures.append((label, str(e)))
    entries.sort(key=lambda t: t[0])
    write_metrics_csv(os.path.join(out_dir, "sweep_metrics.csv"),
                      [row for _, row in entries])
    if failures:
        with open(os.path.join(out_dir, "failures.csv"), "w") as f:
            f.write("value,error\n")
            for label, err in failures:
                err = err.replace("\n", " ").replace('"', "'")
                f.write(f'{label},"{err}"\n')
    return [row for _, row in entries]


def _assign(base: dict, parameter: str, value) -> dict:
    import copy

    raw = copy.deepcopy(base)
    if parameter == "defense.bido":
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError("sweep.values: defense.bido expects [lambda_x, lambda_y] pairs")
        raw.setdefault("defense", {})["lambda_x"] = float(value[0])
        raw.setdefault("defense", {})["lambda_y"] = float(value[1])
        return raw
    from .config import set_by_path

    set_by_path(raw, parameter, value)
    return raw


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedshield",
        description="Federated-learning privacy harness: latent-noise defense, "
                    "gradient inversion attack, baselines and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("pretrain", "learn noise distribution parameters and save them"),
        ("run", "federate, attack the victim update, evaluate"),
        ("sweep", "one run per swept hyperparameter value"),
    ):
        sp = sub.add_parser(name, help=desc)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--profile", choices=["desk", "paper"], default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--threads", type=int, default=1,
                        help="torch threads (1 = strict determinism)")
    sp = sub.add_parser("plot", help="MSE-vs-accuracy scatter from metrics CSVs")
    sp.add_argument("csvs", nargs="+", help="metrics CSV files")
    sp.add_argument("--out", required=True, help="output SVG path")
    sp.add_argument("--threads", type=int, default=1)

    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        if args.command == "plot":
            n = plot_mse_vs_accuracy(args.csvs, args.out)
            print(f"wrote {args.out} ({n} series)")
            return 0
        cfg = load_config(args.config, profile=args.profile, seed=args.seed,
                          out=args.out)
        if args.command == "pretrain":
            path = cmd_pretrain(cfg)
            print(f"wrote {path}")
        elif args.command == "run":
            row = cmd_run(cfg)
            print(f"wrote {cfg.output_dir}/metrics.csv: "
                  f"acc={_fmt(row['client_acc'])} "
                  f"psnr_db={_fmt(row['recon_psnr_db'])}")
        elif args.command == "sweep":
            rows = cmd_sweep(cfg)
            print(f"wrote {cfg.output_dir}/sweep_metrics.csv ({len(rows)} rows)")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PlotError as e:
        print(f"plot error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
