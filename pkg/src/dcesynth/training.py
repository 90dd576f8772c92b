"""WGAN-GP training loop, checkpointing and the loss-component ablation harness.

Each step performs ``n_critic`` critic updates (Wasserstein loss plus gradient
penalty on detached generator output) followed by one generator update on the
composite objective. Epoch shuffling is stateless in (seed, epoch), so a run
can resume from any checkpoint and reproduce the uninterrupted step sequence
bit for bit; the gradient-penalty epsilon stream lives in the train state and
is serialized with it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .adversarial import CriticConfig, PatchCritic, adversarial_terms
from .data import TrainingSample
from .generator import GeneratorConfig, SynthesisGenerator
from .losses import LossWeights, SoftHistogramConfig, composite_generator_loss
from .metrics import MetricsReport, RandomConvExtractor, evaluate_dataset

logger = logging.getLogger(__name__)

LOSS_KEYS = ("adv", "L1", "MI", "freq_pix", "freq_fft", "gp")


@dataclass
class TrainConfig:
    """Training hyperparameters; the dataclass defaults are the desk scale.

    The desk critic uses two strided blocks so its receptive field fits
    16-64 px slices; ``paper_preset`` restores the full three-block critic,
    batch size 6, 200 epochs and a window that divides 160x160 crops.
    """

    epochs: int = 50
    batch_size: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.9)
    n_critic: int = 1
    gp_weight: float = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=lambda: CriticConfig(num_blocks=2))
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    enable_l1: bool = True
    enable_freq: bool = True
    enable_mi: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.n_critic < 0:
            raise ValueError("n_critic must be >= 0")
        self.betas = tuple(self.betas)

    @classmethod
    def paper_preset(cls) -> "TrainConfig":
        return cls(
            epochs=200,
            batch_size=6,
            generator=GeneratorConfig(embed_dim=32, window_size=10),
            critic=CriticConfig(num_blocks=3),
        )

    def effective_weights(self) -> LossWeights:
        return self.weights.with_terms(self.enable_l1, self.enable_freq, self.enable_mi)

    def fingerprint(self) -> str:
        blob = self.generator.fingerprint() + self.critic.fingerprint()
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_metadata(self) -> dict:
        """Emitted alongside runs; records settings the source left open."""
        return {
            "optimizer": "adam",
            "lr": self.lr,
            "betas": list(self.betas),
            "n_critic": self.n_critic,
            "gp_weight": self.gp_weight,
            "seed": self.seed,
            "assumptions": [
                "optimizer, learning rate and schedule chosen (constant-lr Adam)",
                "n_critic=1 paired-translation convention",
                "gradient penalty weight 10",
                "single dual-channel generator for both phases",
            ],
        }


def _dataclass_from_dict(cls, data: dict):
    """Build a (possibly nested) config dataclass from a plain mapping."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown {cls.__name__} field: {key!r}")
        sub = {
            "weights": LossWeights,
            "generator": GeneratorConfig,
            "critic": CriticConfig,
            "histogram": SoftHistogramConfig,
        }.get(key)
        if sub is not None and isinstance(value, dict):
            kwargs[key] = _dataclass_from_dict(sub, value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    return _dataclass_from_dict(TrainConfig, data or {})


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def _make_adam(params, config: TrainConfig) -> torch.optim.Adam:
    try:
        return torch.optim.Adam(params, lr=config.lr, betas=config.betas, fused=True)
    except (RuntimeError, ValueError):  # fused unsupported on this build
        return torch.optim.Adam(params, lr=config.lr, betas=config.betas)


@dataclass
class StepRecord:
    step: int
    losses: dict[str, float]  # exactly the LOSS_KEYS terms, unweighted
    total: float
    critic_loss: float
    wasserstein_gap: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to continue training deterministically."""

    generator: SynthesisGenerator
    critic: PatchCritic
    gen_opt: torch.optim.Adam
    critic_opt: torch.optim.Adam
    rng: torch.Generator
    step: int = 0


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)

    def loss_series(self, key: str) -> list[float]:
        if key == "total":
            return [r.total for r in self.steps]
        return [r.losses[key] for r in self.steps]


def init_state(config: TrainConfig) -> TrainState:
    """Seeded model/optimizer construction; same config + seed, same weights."""
    torch.manual_seed(config.seed)
    generator = SynthesisGenerator(config.generator)
    critic = PatchCritic(config.critic)
    rng = torch.Generator().manual_seed(config.seed + 0x9E3779B1)
    return TrainState(
        generator=generator,
        critic=critic,
        gen_opt=_make_adam(generator.parameters(), config),
        critic_opt=_make_adam(critic.parameters(), config),
        rng=rng,
    )


def _check_finite(named_values: dict[str, float], step: int) -> None:
    for name, value in named_values.items():
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss term '{name}' at step {step}: {value}")


def train_step(
    state: TrainState, batch: tuple[torch.Tensor, torch.Tensor], config: TrainConfig
) -> StepRecord:
    """One optimization step (critic updates then a generator update), in place."""
    inputs, targets = batch
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    state.generator.train()
    state.critic.train()
    weights = config.effective_weights()

    # one generator forward per step: its detached output feeds the critic
    # updates, the live graph feeds the generator update afterwards
    fake = state.generator(inputs)
    fake_detached = fake.detach()

    gp_value = 0.0
    critic_loss_value = 0.0
    gap_value = 0.0
    for _ in range(config.n_critic):
        terms = adversarial_terms(
            state.critic, inputs, targets, fake_detached, config.gp_weight, rng=state.rng
        )
        gp_value = float(terms.gradient_penalty.detach())
        critic_loss_value = float(terms.critic_loss.detach())
        gap_value = float(terms.wasserstein_gap.detach())
        _check_finite({"critic": critic_loss_value, "gp": gp_value}, state.step + 1)
        state.critic_opt.zero_grad(set_to_none=True)
        terms.critic_loss.backward()
        state.critic_opt.step()

    adv = -state.critic(inputs, fake).mean()
    total, breakdown = composite_generator_loss(targets, fake, inputs, adv, weights)
    losses = {k: float(v.detach()) for k, v in breakdown.items()}
    losses["gp"] = gp_value
    total_value = float(total.detach())
    _check_finite({**losses, "total": total_value}, state.step + 1)
    state.gen_opt.zero_grad(set_to_none=True)
    total.backward()
    state.gen_opt.step()
    state.step += 1

    return StepRecord(
        step=state.step,
        losses=losses,
        total=total_value,
        critic_loss=critic_loss_value,
        wasserstein_gap=gap_value,
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, config: TrainConfig, path: str | Path) -> None:
    """Atomic checkpoint write (temp file + rename)."""
    path = Path(path)
    payload = {
        "fingerprint": config.fingerprint(),
        "config": config_to_dict(config),
        "step": state.step,
        "generator": state.generator.state_dict(),
        "critic": state.critic.state_dict(),
        "gen_opt": state.gen_opt.state_dict(),
        "critic_opt": state.critic_opt.state_dict(),
        "rng_state": state.rng.get_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, config: TrainConfig | None = None):
    """Restore (state, config); refuses architecture fingerprint mismatches."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    stored = config_from_dict(payload["config"])
    if config is not None and config.fingerprint() != payload["fingerprint"]:
        raise ValueError(
            f"checkpoint fingerprint {payload['fingerprint']} does not match the "
            f"requested architecture {config.fingerprint()}; refusing to load"
        )
    config = config if config is not None else stored
    state = init_state(config)
    state.generator.load_state_dict(payload["generator"])
    state.critic.load_state_dict(payload["critic"])
    state.gen_opt.load_state_dict(payload["gen_opt"])
    state.critic_opt.load_state_dict(payload["critic_opt"])
    state.rng.set_state(payload["rng_state"])
    state.step = payload["step"]
    return state, config


# ---------------------------------------------------------------------------
# Fit and ablation
# ---------------------------------------------------------------------------


def _epoch_permutation(seed: int, epoch: int, n: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=g)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def stack_samples(samples: list[TrainingSample]) -> tuple[torch.Tensor, torch.Tensor]:
    inputs = torch.as_tensor(np.stack([s.input for s in samples]))
    targets = torch.as_tensor(np.stack([s.target for s in samples]))
    return inputs, targets


def fit(
    dataset: list[TrainingSample],
    config: TrainConfig,
    val_dataset: list[TrainingSample] | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    extractor=None,
) -> tuple[TrainState, TrainHistory]:
    """Train for ``config.epochs`` epochs over the dataset.

    Periodic evaluation runs on the validation samples (the training set when
    none are given); checkpoints are written to ``out_dir`` at the configured
    step interval plus a final one. History contains every step record.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if resume_from is not None:
        state, config = load_checkpoint(resume_from, config)
    else:
        state = init_state(config)
    extractor = extractor or RandomConvExtractor()
    eval_samples = val_dataset if val_dataset else dataset
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    inputs_all, targets_all = stack_samples(dataset)
    n = len(dataset)
    spe = _steps_per_epoch(n, config.batch_size)
    total_steps = config.epochs * spe
    history = TrainHistory()

    def evaluate_now() -> MetricsReport:
        state.generator.eval()
        report = evaluate_dataset(state.generator, eval_samples, extractor)
        state.generator.train()
        return report

    while state.step < total_steps:
        epoch = state.step // spe
        perm = _epoch_permutation(config.seed, epoch, n)
        start_batch = state.step % spe
        for b in range(start_batch, spe):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            record = train_step(state, (inputs_all[idx], targets_all[idx]), config)
            history.steps.append(record)
            if state.step % config.eval_interval == 0 or state.step == total_steps:
                history.evals.append((state.step, evaluate_now()))
            if out_dir is not None and (
                state.step % config.checkpoint_interval == 0 or state.step == total_steps
            ):
                save_checkpoint(state, config, out_dir / f"ckpt_{state.step:07d}.pt")
            if state.step >= total_steps:
                break

    if out_dir is not None:
        save_checkpoint(state, config, out_dir / "final.pt")
    return state, history


ABLATION_ROWS = (
    ("L1", dict(enable_l1=True, enable_freq=False, enable_mi=False)),
    ("L1+freq_pix+freq_fft", dict(enable_l1=True, enable_freq=True, enable_mi=False)),
    ("L1+freq_pix+freq_fft+MI", dict(enable_l1=True, enable_freq=True, enable_mi=True)),
)


@dataclass
class AblationRow:
    label: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    checkpoint: str | None = None


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def to_text(self) -> str:
        lines = [
            f"{'config':<28}{'PSNR':>20}{'SSIM':>22}",
        ]
        for r in self.rows:
            lines.append(
                f"{r.label:<28}"
                f"{r.psnr_mean:>10.2f} +/- {r.psnr_std:<6.2f}"
                f"{r.ssim_mean:>10.4f} +/- {r.ssim_std:<6.4f}"
            )
        return "\n".join(lines)


def ablate(
    dataset: list[TrainingSample],
    config: TrainConfig,
    val_dataset: list[TrainingSample] | None = None,
    out_dir: str | Path | None = None,
    extractor=None,
) -> AblationTable:
    """Train the three loss configurations with identical seeds and compare.

    Every row shares the base config (and seed); only the loss-term switches
    differ. Metrics are pooled over both output phases, mirroring the
    single-column comparison shape of the source protocol.
    """
    extractor = extractor or RandomConvExtractor()
    eval_samples = val_dataset if val_dataset else dataset
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for label, switches in ABLATION_ROWS:
        row_config = replace(copy.deepcopy(config), **switches)
        row_dir = None
        if out_dir is not None:
            row_dir = out_dir / label.replace("+", "_")
        state, _ = fit(dataset, row_config, val_dataset, out_dir=row_dir, extractor=extractor)
        state.generator.eval()
        report = evaluate_dataset(state.generator, eval_samples, extractor)
        psnr_mean, psnr_std = report.pooled("psnr")
        ssim_mean, ssim_std = report.pooled("ssim")
        rows.append(
            AblationRow(
                label=label,
                psnr_mean=psnr_mean,
                psnr_std=psnr_std,
                ssim_mean=ssim_mean,
                ssim_std=ssim_std,
                checkpoint=str(row_dir / "final.pt") if row_dir is not None else None,
            )
        )
        logger.info("ablation row %s: PSNR %.2f SSIM %.4f", label, psnr_mean, ssim_mean)
    return AblationTable(rows)


def write_history(history: TrainHistory, out_dir: str | Path) -> None:
    """Line-delimited (step, term, value) records plus evaluation snapshots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "losses.jsonl", "w") as f:
        for record in history.steps:
            for term in LOSS_KEYS:
                f.write(
                    json.dumps({"step": record.step, "term": term, "value": record.losses[term]})
                    + "\n"
                )
            f.write(json.dumps({"step": record.step, "term": "total", "value": record.total}) + "\n")
    with open(out_dir / "evals.jsonl", "w") as f:
        for step, report in history.evals:
            f.write(json.dumps({"step": step, **report.to_dict()}) + "\n")
