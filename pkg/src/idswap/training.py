"""Optimization loop: alternating same-/different-identity batches, one D update
then one G update per step, line-per-step logging, and resumable checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors
from .core import (
    TrainConfig,
    derive_seed,
    load_config,
    rng_from_blob,
    rng_state_blob,
    save_config,
    seeded_rng,
    validate_config,
)
from .data import FaceDataset, sample_batch
from .discriminator import MultiScaleDiscriminator, build_discriminator
from .embedder import IdentityEmbedder, pretrain_embedder
from .generator import Generator, build_generator
from .losses import (
    LossReport,
    fm_sum,
    gradient_penalty,
    hinge_d_loss,
    hinge_g_loss,
    identity_loss,
    reconstruction_loss,
    total_generator_loss,
    variant_from_config,
)

#: Config deltas of each published training variant.
PRESETS = {
    "SimSwap": {},
    "oFM": {"fm_variant": "oFM"},
    "nFM": {"fm_variant": "nFM"},
    "wFM_bar": {"fm_variant": "wFM_bar"},
    "oFM_FM-": {"fm_variant": "oFM", "lambda_fm": 5.0},
    "oFM_id+": {"fm_variant": "oFM", "lambda_id": 20.0},
    "wFM_id+": {"fm_variant": "wFM", "lambda_id": 20.0},
}


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the run is aborted rather than silently skipped."""


def apply_preset(name: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return replace(base if base is not None else TrainConfig(), **PRESETS[name])


def batch_kind(step: int) -> str:
    """Odd steps train on same-identity pairs, even steps on different identities."""
    return "same" if step % 2 == 1 else "diff"


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    discriminator: MultiScaleDiscriminator
    embedder: IdentityEmbedder
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: np.random.Generator
    step: int = 0


def init_train_state(cfg: TrainConfig, embedder: IdentityEmbedder) -> TrainState:
    validate_config(cfg)
    embedder.requires_grad_(False)
    embedder.eval()
    generator = build_generator(cfg)
    discriminator = build_discriminator(cfg)
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    rng = seeded_rng(derive_seed(cfg.seed, "train-stream"))
    return TrainState(cfg, generator, discriminator, embedder, opt_g, opt_d, rng)


def _check_finite(value: torch.Tensor, label: str, step: int):
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"{label} is non-finite at step {step}: {value.item()!r}")


def train_step_d(state: TrainState, batch) -> dict[str, float]:
    """One Adam update of the discriminator on hinge loss + weighted gradient penalty."""
    cfg = state.cfg
    i_s, i_t = batch[0], batch[1]
    with torch.no_grad():
        v_s = state.embedder(i_s)
        i_r = state.generator(i_t, v_s)

    state.discriminator.requires_grad_(True)
    state.opt_d.zero_grad(set_to_none=True)
    real_scores = [score for score, _ in state.discriminator(i_t)]
    fake_scores = [score for score, _ in state.discriminator(i_r)]
    l_adv_d = hinge_d_loss(real_scores, fake_scores)

    if cfg.lambda_gp != 0.0:
        fns = [
            (lambda x, k=k: state.discriminator.forward_scale(x, k)[0])
            for k in range(1, state.discriminator.n_scales + 1)
        ]
        l_gp = gradient_penalty(fns, i_t, i_r, rng=state.rng)
    else:
        l_gp = torch.zeros(())

    loss = l_adv_d + cfg.lambda_gp * l_gp
    _check_finite(loss, "discriminator loss", state.step + 1)
    loss.backward()
    state.opt_d.step()
    return {"l_adv_d": l_adv_d.item(), "l_gp": l_gp.item()}


def train_step_g(state: TrainState, batch, same_identity: bool) -> dict[str, float]:
    """One Adam update of the generator on the weighted objective; D and embedder untouched."""
    cfg = state.cfg
    i_s, i_t = batch[0], batch[1]
    variant = variant_from_config(cfg)

    state.discriminator.requires_grad_(False)
    with torch.no_grad():
        v_s = state.embedder(i_s)
    i_r = state.generator(i_t, v_s)
    v_r = state.embedder(i_r)

    l_id = identity_loss(v_r, v_s)
    l_recon = reconstruction_loss(i_r, i_t, same_identity)

    fake_outs = state.discriminator(i_r)
    l_adv_g = hinge_g_loss([score for score, _ in fake_outs])
    if variant.layer_range(len(fake_outs[0][1])):
        with torch.no_grad():
            real_outs = state.discriminator(i_t)
        l_fm = fm_sum(
            [feats for _, feats in fake_outs], [feats for _, feats in real_outs], variant
        )
    else:
        l_fm = torch.zeros((), dtype=torch.float64)

    total = total_generator_loss(l_id, l_recon, l_adv_g, l_fm, cfg)
    _check_finite(total, "generator loss", state.step + 1)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    state.discriminator.requires_grad_(True)
    return {
        "l_id": l_id.item(),
        "l_recon": l_recon.item(),
        "l_adv_g": l_adv_g.item(),
        "l_fm": l_fm.item(),
    }


def run_step(state: TrainState, dataset: FaceDataset) -> LossReport:
    """Sample the scheduled batch kind, update D then G, and bump the step counter."""
    step = state.step + 1
    same = batch_kind(step) == "same"
    batch = sample_batch(dataset, same, state.cfg.batch_size, state.rng)
    d_parts = train_step_d(state, batch)
    g_parts = train_step_g(state, batch, same)
    state.step = step
    return LossReport.from_components(state.cfg, **d_parts, **g_parts)


def log_line(step: int, report: LossReport) -> str:
    record = {"step": step, "batch_kind": batch_kind(step)}
    record.update(report.as_dict())
    return json.dumps(record)


def parse_log(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _pack_adam(opt: torch.optim.Adam, params, prefix: str, tensors: dict):
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        tensors[f"{prefix}.{i}.step"] = torch.as_tensor(
            [float(st["step"])], dtype=torch.float32
        )
        tensors[f"{prefix}.{i}.exp_avg"] = st["exp_avg"]
        tensors[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"]


def _unpack_adam(opt: torch.optim.Adam, params, prefix: str, tensors: dict):
    for i, p in enumerate(params):
        key = f"{prefix}.{i}.step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[key][0])),
            "exp_avg": tensors[f"{prefix}.{i}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{prefix}.{i}.exp_avg_sq"].clone(),
        }


def save_checkpoint(state: TrainState, directory) -> None:
    """Bundle generator, discriminator, embedder, optimizer moments and rng state."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: dict = {}
    for prefix, module in (
        ("generator", state.generator),
        ("discriminator", state.discriminator),
        ("embedder", state.embedder),
    ):
        for name, tensor in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = tensor
    _pack_adam(state.opt_g, list(state.generator.parameters()), "opt_g", tensors)
    _pack_adam(state.opt_d, list(state.discriminator.parameters()), "opt_d", tensors)
    tensors["trainer.rng_state"] = torch.from_numpy(rng_state_blob(state.rng))
    tensors["trainer.step"] = torch.tensor([state.step], dtype=torch.int64)
    save_tensors(directory, tensors)
    save_config(state.cfg, directory / "config.txt")


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    cfg = load_config(directory / "config.txt")
    tensors = load_tensors(directory)

    embedder = IdentityEmbedder(embed_dim=cfg.embed_dim)
    generator = Generator(n_id_blocks=cfg.n_id_blocks, embed_dim=cfg.embed_dim)
    discriminator = MultiScaleDiscriminator(n_scales=cfg.n_discriminators)
    for prefix, module in (
        ("generator", generator),
        ("discriminator", discriminator),
        ("embedder", embedder),
    ):
        module.load_state_dict(
            {
                name[len(prefix) + 1 :]: tensor
                for name, tensor in tensors.items()
                if name.startswith(prefix + ".")
            }
        )
    embedder.requires_grad_(False)
    embedder.eval()

    opt_g = torch.optim.Adam(
        generator.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    _unpack_adam(opt_g, list(generator.parameters()), "opt_g", tensors)
    _unpack_adam(opt_d, list(discriminator.parameters()), "opt_d", tensors)

    rng = rng_from_blob(tensors["trainer.rng_state"].numpy())
    step = int(tensors["trainer.step"][0])
    return TrainState(cfg, generator, discriminator, embedder, opt_g, opt_d, rng, step=step)


def train(
    cfg: TrainConfig,
    dataset: FaceDataset,
    out_dir,
    *,
    embedder: Optional[IdentityEmbedder] = None,
    resume_from=None,
    embedder_epochs: int = 10,
    progress: bool = False,
) -> TrainState:
    """Run the full schedule; writes config echo, per-step log and checkpoints.

    Resuming restores every stateful piece, so the continued run reproduces the
    uninterrupted one bit for bit.
    """
    validate_config(cfg)
    if dataset.n_identities < 2:
        raise ValueError("training requires a dataset with at least 2 identities")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.cfg != cfg:
            raise ValueError("checkpoint config does not match the requested config")
        log_mode = "a"
    else:
        if embedder is None:
            embedder = pretrain_embedder(
                dataset, epochs=embedder_epochs, embed_dim=cfg.embed_dim, seed=cfg.seed
            )
        state = init_train_state(cfg, embedder)
        log_mode = "w"

    save_config(cfg, out_dir / "config.txt")
    log_path = out_dir / "log.jsonl"
    with open(log_path, log_mode, encoding="utf-8") as log:
        while state.step < cfg.steps:
            report = run_step(state, dataset)
            log.write(log_line(state.step, report) + "\n")
            if progress and state.step % 50 == 0:
                print(f"step {state.step}/{cfg.steps} total_g={report.total_g:.4f}", flush=True)
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                save_checkpoint(state, out_dir / f"checkpoint_step{state.step:06d}")
    save_checkpoint(state, out_dir / "checkpoint_final")
    return state
