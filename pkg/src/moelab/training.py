"""Training loop machinery: AdamW steps, weight EMA, checkpoints, sampling.

One Trainer owns the parameters, optimizer state, EMA shadow, threshold
states and RNG; everything it touches round-trips through the checkpoint
container so a resumed run replays the original trajectory bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses as losses_mod
from . import metrics as metrics_mod
from .denoiser import DenoiserConfig, denoiser_forward, init_denoiser
from .diffusion import NoiseSchedule, SyntheticTask, build_schedule
from .losses import LossWeights, aux_inputs_from_routing
from .routing import ConfigError, StateError
from .tensor import Tensor, backward

__all__ = [
    "NumericError",
    "AdamW",
    "WeightEma",
    "LogRecord",
    "TrainerConfig",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Non-finite loss or state; carries a diagnostic breakdown."""


class AdamW(object):
    """AdamW with zero weight decay (constant learning rate)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class WeightEma(object):
    """Shadow copy of the weights, updated as ema <- d*ema + (1-d)*w."""

    def __init__(self, named: list[tuple[str, Tensor]], decay: float = 0.999):
        self.decay = decay
        self.shadow = {name: t.data.copy() for name, t in named}

    def update(self, named: list[tuple[str, Tensor]]) -> None:
        d = self.decay
        for name, t in named:
            self.shadow[name] = d * self.shadow[name] + (1.0 - d) * t.data


@dataclass
class LogRecord:
    step: int
    diffusion: float
    plr: float
    sim: float
    blc: float
    total: float
    max_vio: float
    comb_usage: float
    mean_active: float

    CSV_COLUMNS = ("step", "diffusion", "plr", "sim", "blc", "total", "max_vio", "comb_usage", "mean_active")

    def csv_row(self) -> str:
        return ",".join(
            [str(self.step)]
            + [f"{getattr(self, c):.10g}" for c in self.CSV_COLUMNS[1:]]
        )


@dataclass(frozen=True)
class TrainerConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    batch_size: int = 32
    lr: float = 1e-4
    ema_decay: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.model.__dict__)
        d.update(
            batch_size=self.batch_size,
            lr=self.lr,
            ema_decay=self.ema_decay,
            w_plr=self.weights.plr,
            w_sim=self.weights.sim,
            w_blc=self.weights.blc,
            seed=self.seed,
        )
        return d


class Trainer(object):
    def __init__(self, config: TrainerConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.params = init_denoiser(config.model, np.random.default_rng(config.seed))
        self.schedule = build_schedule(config.model.total_steps, config.model.schedule)
        self.task = SyntheticTask(
            num_classes=config.model.num_classes,
            tokens=config.model.tokens,
            dim=config.model.model_dim,
            seed=config.seed + 7919,
        )
        self.opt = AdamW(self.params.parameters(), lr=config.lr)
        self.ema = WeightEma(self.params.named_tensors(), decay=config.ema_decay)
        self.step_count = 0

    # ------------------------------------------------------------------

    def train_step(self) -> LogRecord:
        cfg = self.config
        batch = self.task.sample_batch(
            self.rng, cfg.batch_size, self.schedule, cfg.model.parameterization
        )
        prediction, layer_outputs = denoiser_forward(
            batch.x_t, batch.t, batch.c, self.params, mode="train"
        )

        diff = losses_mod.diffusion_loss(prediction, batch.y)
        plr = sim = blc = None
        if layer_outputs:
            plr = losses_mod.per_layer_reg_loss([out.y_hat for out in layer_outputs], batch.y)
            if cfg.model.num_experts >= 2:  # pairwise losses are undefined for a single expert
                aux = [
                    aux_inputs_from_routing(out.route.mask, out.logits, cfg.model.k)
                    for out in layer_outputs
                ]
                sim = _mean_over_layers([losses_mod.router_similarity_loss(a) for a in aux])
                blc = _mean_over_layers([losses_mod.balance_loss(a) for a in aux])
        total, breakdown = losses_mod.total_loss(diff, plr, sim, blc, cfg.weights)

        if not np.isfinite(total.item()):
            raise NumericError(f"non-finite loss at step {self.step_count}: {breakdown}")

        backward(total, self.params.parameters())
        self.opt.step()
        self.ema.update(self.params.named_tensors())
        self.step_count += 1

        max_vio = comb = mean_active = float("nan")
        if layer_outputs:
            vios, combs, actives = [], [], []
            for out in layer_outputs:
                vios.append(metrics_mod.max_violation(out.route.mask, cfg.model.k))
                if cfg.model.num_experts >= 2:
                    combs.append(metrics_mod.combination_usage(out.route.mask).ratio)
                actives.append(float(out.route.mask.sum(axis=-1).mean()))
            max_vio = float(np.mean(vios))
            comb = float(np.mean(combs)) if combs else 0.0
            mean_active = float(np.mean(actives))

        return LogRecord(
            step=self.step_count,
            diffusion=breakdown["diffusion"],
            plr=breakdown["plr"],
            sim=breakdown["sim"],
            blc=breakdown["blc"],
            total=breakdown["total"],
            max_vio=max_vio,
            comb_usage=comb,
            mean_active=mean_active,
        )

    # ------------------------------------------------------------------

    def forward(self, batch, mode: str = "eval"):
        """Run the denoiser on a batch without touching optimizer state."""
        return denoiser_forward(batch.x_t, batch.t, batch.c, self.params, mode=mode)

    def sample(
        self,
        n: int,
        c: np.ndarray | int,
        rng: np.random.Generator | None = None,
        record_masks: bool = False,
    ) -> tuple[np.ndarray, list[dict]]:
        """Ancestral reverse process under thresholded routing.

        Returns generated samples (n, L, D) and, per reverse step, the mean
        active experts per token per layer (plus raw masks on request).
        """
        cfg = self.config.model
        if not cfg.dense:
            for blk in self.params.blocks:
                if not blk.moe.threshold.initialized:
                    raise StateError("sampling needs initialized thresholds; run training first")
        rng = rng if rng is not None else self.rng
        sched = self.schedule
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()

        x = rng.normal(size=(n, cfg.tokens, cfg.model_dim))
        allocation_log: list[dict] = []
        for step_t in range(sched.total_steps, 0, -1):
            t_vec = np.full(n, step_t, dtype=np.int64)
            pred, layer_outputs = denoiser_forward(x, t_vec, c, self.params, mode="infer")
            eps_hat = _to_eps(pred.data, x, step_t, sched, cfg.parameterization)

            ab_t = sched.alpha_bar[step_t]
            ab_prev = sched.alpha_bar[step_t - 1]
            alpha_t = ab_t / ab_prev
            beta_t = 1.0 - alpha_t
            mean = (x - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
            if step_t > 1:
                sigma = np.sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t))
                x = mean + sigma * rng.normal(size=x.shape)
            else:
                x = mean

            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite sample state at reverse step {step_t}")
            entry = {
                "t": step_t,
                "mean_active_per_layer": [
                    float(out.route.mask.sum(axis=-1).mean()) for out in layer_outputs
                ],
            }
            if record_masks:
                entry["masks"] = [out.route.mask for out in layer_outputs]
            allocation_log.append(entry)
        return x, allocation_log


def _mean_over_layers(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _to_eps(pred: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule, parameterization: str) -> np.ndarray:
    """Convert the network's prediction to an estimate of the noise."""
    ab = sched.alpha_bar[t]
    if parameterization == "eps":
        return pred
    if parameterization == "x0":
        return (x_t - np.sqrt(ab) * pred) / np.sqrt(1.0 - ab)
    if parameterization == "v":
        return np.sqrt(1.0 - ab) * x_t + np.sqrt(ab) * pred
    raise ConfigError(f"unknown parameterization {parameterization!r}")


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, trainer: Trainer) -> None:
    """Single .npz container: weights, EMA shadow, optimizer, thresholds, RNG."""
    arrays: dict[str, np.ndarray] = {}
    for name, t in trainer.params.named_tensors():
        arrays[f"param/{name}"] = t.data
    for name, arr in trainer.ema.shadow.items():
        arrays[f"ema/{name}"] = arr
    for i, (m, v) in enumerate(zip(trainer.opt.m, trainer.opt.v)):
        arrays[f"opt_m/{i}"] = m
        arrays[f"opt_v/{i}"] = v

    thresholds = [
        blk.moe.threshold.to_dict() if blk.moe is not None else None
        for blk in trainer.params.blocks
    ]
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": trainer.step_count,
        "opt_step": trainer.opt.step_count,
        "config": trainer.config.to_dict(),
        "thresholds": thresholds,
        "rng_state": trainer.rng.bit_generator.state,
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, config: TrainerConfig, strict_config: bool = True) -> Trainer:
    """Rebuild a Trainer in the exact state it was saved in."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {meta['version']} != {CHECKPOINT_VERSION}")
        if strict_config:
            saved, current = meta["config"], config.to_dict()
            if saved != current:
                diff = {
                    key: (saved.get(key), current.get(key))
                    for key in sorted(set(saved) | set(current))
                    if saved.get(key) != current.get(key)
                }
                raise ConfigError(f"checkpoint config mismatch (saved vs requested): {diff}")

        trainer = Trainer(config)
        for name, t in trainer.params.named_tensors():
            t.data = data[f"param/{name}"].copy()
        for name in list(trainer.ema.shadow):
            trainer.ema.shadow[name] = data[f"ema/{name}"].copy()
        for i in range(len(trainer.opt.m)):
            trainer.opt.m[i] = data[f"opt_m/{i}"].copy()
            trainer.opt.v[i] = data[f"opt_v/{i}"].copy()
        trainer.opt.step_count = meta["opt_step"]
        trainer.step_count = meta["step"]
        for blk, thr in zip(trainer.params.blocks, meta["thresholds"]):
            if blk.moe is not None and thr is not None:
                blk.moe.threshold.momentum = thr["momentum"]
                blk.moe.threshold.tau = thr["tau"]
        trainer.rng.bit_generator.state = meta["rng_state"]
    return trainer
