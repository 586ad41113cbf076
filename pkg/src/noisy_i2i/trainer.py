"""Alternating D/C and G optimization with checkpointing and score trajectories."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .datasets import LabeledDataset, augment_hflip
from .errors import InvalidInputError, InvalidSpecError, NumericalError
from .evaluation import Evaluator
from .losses import LossBundle, LossWeights, Variant
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .noise import NoiseKind, NoiseSpec
from .robust import RobustClsConfig, RobustMethod, coteach_losses, forward_corrected_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
CHECKPOINT_NAME = "checkpoint.pt"


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.STARGAN
    weights: LossWeights = field(default_factory=LossWeights)
    robust_method: RobustMethod = RobustMethod.NAIVE
    drop_rate: float | None = None  # co-teaching; None means "same as the noise rate"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    epochs_flat: int = 20
    epochs_decay: int = 20
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    d_steps_per_g: int = 5
    batch_size: int = 16
    seed: int = 0
    num_domains: int = 3
    image_size: int = 32
    image_channels: int = 3
    g_base_width: int = 16
    g_res_blocks: int = 2
    d_base_width: int = 16
    d_layers: int = 4
    hflip: bool = True
    eval_every_epochs: int = 5
    cls_eval_every_iters: int = 100
    checkpoint_every_epochs: int = 5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "robust_method", RobustMethod(self.robust_method))
        if self.d_steps_per_g < 1:
            raise InvalidSpecError("d_steps_per_g must be >= 1")
        if self.lr <= 0:
            raise InvalidSpecError("lr must be positive")
        if self.epochs_flat < 0 or self.epochs_decay < 0 or self.total_epochs < 1:
            raise InvalidSpecError("need at least one epoch")
        if self.batch_size < 1:
            raise InvalidSpecError("batch_size must be >= 1")
        if self.noise.num_domains != self.num_domains:
            raise InvalidSpecError("noise spec and config disagree on num_domains")
        self.robust_config()  # validates method-specific fields

    @property
    def total_epochs(self) -> int:
        return self.epochs_flat + self.epochs_decay

    @property
    def tau(self) -> float:
        return self.noise.rate if self.drop_rate is None else self.drop_rate

    def robust_config(self) -> RobustClsConfig:
        if self.robust_method is RobustMethod.FORWARD:
            return RobustClsConfig(RobustMethod.FORWARD, T=self.noise.transition_matrix())
        if self.robust_method is RobustMethod.COTEACHING:
            return RobustClsConfig(RobustMethod.COTEACHING, drop_rate=self.tau)
        return RobustClsConfig()

    @property
    def uses_adv2(self) -> bool:
        return self.variant.uses_adv2 or self.weights.use_adv2

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.image_size, self.image_channels, self.num_domains,
                               self.g_base_width, self.g_res_blocks)

    def discriminator_config(self, with_classifier: bool = True) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.image_size, self.image_channels, self.num_domains,
                                   self.d_base_width, self.d_layers, with_classifier=with_classifier)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseSpec(**d["noise"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpecError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if is_dataclass(obj):
        return _plain(asdict(obj))
    return obj


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Constant for ``epochs_flat`` epochs, then linear to 0 at the schedule end."""
    total = config.total_epochs
    if not 0 <= epoch <= total:
        raise InvalidInputError(f"epoch {epoch} outside the schedule [0, {total}]")
    if epoch < config.epochs_flat:
        return config.lr
    return config.lr * (1.0 - (epoch - config.epochs_flat) / config.epochs_decay)


@dataclass
class ScoreTrajectory:
    """``(step, metric, value)`` triples; steps count D/C updates."""

    points: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, step: int, metric: str, value: float) -> None:
        previous = self.series(metric)
        if previous and step <= previous[-1][0]:
            raise InvalidInputError(f"non-increasing step {step} for series {metric!r}")
        self.points.append((int(step), metric, float(value)))

    def series(self, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, m, v in self.points if m == metric]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for s, m, v in self.points:
                f.write(json.dumps({"step": s, "metric": m, "value": v}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ScoreTrajectory":
        traj = cls()
        for line in Path(path).read_text().splitlines():
            row = json.loads(line)
            traj.points.append((row["step"], row["metric"], row["value"]))
        return traj


class TrainState:
    """Networks, optimizers, counters and random streams of one run."""

    def __init__(self, config: TrainConfig):
        self.config = cfg = config
        torch.manual_seed(cfg.seed)
        self.G = Generator(cfg.generator_config())
        self.D = Discriminator(cfg.discriminator_config())
        self.D2 = Discriminator(cfg.discriminator_config(with_classifier=False)) if cfg.uses_adv2 else None
        robust = cfg.robust_config()
        self.robust = robust
        self.peer_b = Discriminator(cfg.discriminator_config()) if robust.method is RobustMethod.COTEACHING else None
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d2 = torch.optim.Adam(self.D2.parameters(), lr=cfg.lr, betas=betas) if self.D2 else None
        self.opt_b = torch.optim.Adam(self.peer_b.parameters(), lr=cfg.lr, betas=betas) if self.peer_b else None
        self.sampler = torch.Generator().manual_seed(cfg.seed + 1)
        self.step = 0
        self.g_updates = 0
        self.epoch = 0
        self.trajectory = ScoreTrajectory()
        self.reports: list[dict] = []

    def modules(self) -> dict:
        mods = {"G": self.G, "D": self.D}
        if self.D2 is not None:
            mods["D2"] = self.D2
        if self.peer_b is not None:
            mods["peer_b"] = self.peer_b
        return mods

    def optimizers(self) -> dict:
        opts = {"G": self.opt_g, "D": self.opt_d}
        if self.opt_d2 is not None:
            opts["D2"] = self.opt_d2
        if self.opt_b is not None:
            opts["peer_b"] = self.opt_b
        return opts

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers().values():
            for group in opt.param_groups:
                group["lr"] = lr

    def classify(self, x):
        return self.D(x).class_logits


def _sample_targets(state: TrainState, y: torch.Tensor) -> torch.Tensor:
    if y.is_floating_point():
        # attribute vectors: borrow the labels of other images in the batch
        return y[torch.randperm(y.shape[0], generator=state.sampler)]
    return torch.randint(0, state.config.num_domains, y.shape, generator=state.sampler)


def _check_finite(terms: dict, where: str) -> None:
    bundle = LossBundle.from_terms(terms)
    if not bundle.is_finite():
        raise NumericalError(f"non-finite loss during {where}; loss bundle: {bundle.recorded()}")


def _d_step(state: TrainState, x, y, y1, y2, terms: dict) -> dict:
    cfg, w = state.config, state.config.weights
    obj = w.gan_objective
    with torch.no_grad():
        fake = state.G(x, y1)
        twice = state.G(fake, y2) if state.D2 is not None else None
    out_real = state.D(x)
    s_fake = state.D(fake).realness
    adv_d = L.adv_from_scores(out_real.realness, s_fake, obj)
    if obj is L.GanObjective.WGAN_GP and w.gp_weight:
        adv_d = adv_d - w.gp_weight * L.gradient_penalty(state.D, x, fake, generator=state.sampler)
    terms["adv_d"] = adv_d

    logits = out_real.class_logits
    extra = 0.0
    if state.robust.method is RobustMethod.FORWARD:
        terms["cls_r"] = forward_corrected_loss(logits, y, state.robust.T)
    elif state.robust.method is RobustMethod.COTEACHING:
        logits_b = state.peer_b.classify(x)
        loss_a, loss_b, idx_a, _ = coteach_losses(logits, logits_b, y, cfg.tau)
        terms["cls_r"] = loss_a
        extra = loss_b
    else:
        terms["cls_r"] = L.classification_nll(logits, y)

    if state.D2 is not None:
        adv2 = L.adv_from_scores(state.D2(x).realness, state.D2(twice).realness, obj)
        if obj is L.GanObjective.WGAN_GP and w.gp_weight:
            adv2 = adv2 - w.gp_weight * L.gradient_penalty(state.D2, x, twice, generator=state.sampler)
        terms["adv2_d"] = adv2

    total_d, _ = L.full_objectives(w, terms, cfg.variant)
    terms["total_d"] = total_d
    _check_finite(terms, "the D/C update")
    opts = [state.opt_d] + [o for o in (state.opt_d2, state.opt_b) if o is not None]
    for o in opts:
        o.zero_grad()
    (total_d + extra).backward()
    for o in opts:
        o.step()
    return terms


def _g_step(state: TrainState, x, y, y1, y2, terms: dict) -> dict:
    cfg, w = state.config, state.config.weights
    coeffs = L.generator_objective(cfg.variant, w)
    fake = state.G(x, y1)
    out_fake = state.D(fake)
    terms["adv_g"] = L.generator_adv(lambda _: out_fake.realness, fake, w.gan_objective)
    terms["cls_f"] = L.classification_nll(out_fake.class_logits, y1)
    twice = None
    if coeffs.get("vcyc") or "adv2_g" in coeffs:
        twice = state.G(fake, y2)
    if coeffs.get("cyc"):
        terms["cyc"] = L.l1(x, state.G(fake, y))
    if coeffs.get("recyc"):
        y_re = L.relabel(state.classify, x, w.relabel_mode, state.sampler, multilabel=y.is_floating_point())
        terms["recyc"] = L.l1(x, state.G(fake, y_re))
    if coeffs.get("vcyc"):
        terms["vcyc"] = L.l1(fake, state.G(twice, y1))
    if "adv2_g" in coeffs:
        terms["adv2_g"] = L.generator_adv(state.D2, twice, w.gan_objective)
    if "id" in coeffs:
        terms["id"] = L.identity_loss(state.G, x, y)
    cyc_coeffs = L.cycle_coefficients(cfg.variant, w)
    if len(cyc_coeffs) > 1:
        terms["mixed"] = sum(c * terms[name] for name, c in cyc_coeffs.items() if c)
    _, total_g = L.full_objectives(w, terms, cfg.variant)
    terms["total_g"] = total_g
    _check_finite(terms, "the G update")
    state.opt_g.zero_grad()
    total_g.backward()
    state.opt_g.step()
    state.g_updates += 1
    return terms


def train_step(state: TrainState, batch) -> LossBundle:
    """One D/C (and D') update; every ``d_steps_per_g``-th call also updates G.

    ``batch`` is ``(images, noisy_labels)``; clean labels never reach here.
    """
    x, y = batch[0], batch[1]
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    cfg = state.config
    if cfg.hflip:
        x = augment_hflip(x, state.sampler)
    state.step += 1
    y1 = _sample_targets(state, y)
    y2 = _sample_targets(state, y)
    terms: dict = {}
    try:
        _d_step(state, x, y, y1, y2, terms)
        if state.step % cfg.d_steps_per_g == 0:
            _g_step(state, x, y, y1, y2, terms)
    except NumericalError as e:
        if "loss bundle" in str(e):
            raise
        raise NumericalError(f"{e} at step {state.step}; loss bundle so far: "
                             f"{LossBundle.from_terms(terms).recorded()}") from e
    return LossBundle.from_terms({k: v.detach() if torch.is_tensor(v) else v for k, v in terms.items()})


def _rng_snapshot(state: TrainState) -> dict:
    return {"torch": torch.get_rng_state(), "sampler": state.sampler.get_state()}


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "manifest": {
            "format_version": CHECKPOINT_FORMAT,
            "config_hash": state.config.config_hash(),
            "epoch": state.epoch,
            "step": state.step,
            "g_updates": state.g_updates,
        },
        "config": state.config.to_dict(),
        "modules": {k: m.state_dict() for k, m in state.modules().items()},
        "optimizers": {k: o.state_dict() for k, o in state.optimizers().items()},
        "rng": _rng_snapshot(state),
        "trajectory": list(state.trajectory.points),
        "reports": list(state.reports),
    }
    buf = io.BytesIO()
    torch.save(_canonical(payload), buf)
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def _canonical(obj):
    # fresh containers and interned strings so pickle's memo (and thus the
    # byte stream) does not depend on which objects happened to be shared
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def load_checkpoint(path: str | Path) -> TrainState:
    payload = torch.load(path, weights_only=False)
    manifest = payload["manifest"]
    if manifest["format_version"] != CHECKPOINT_FORMAT:
        raise InvalidSpecError(f"unsupported checkpoint format {manifest['format_version']}")
    config = TrainConfig.from_dict(payload["config"])
    if config.config_hash() != manifest["config_hash"]:
        raise InvalidSpecError("checkpoint config hash mismatch")
    state = TrainState(config)
    for k, m in state.modules().items():
        m.load_state_dict(payload["modules"][k])
    for k, o in state.optimizers().items():
        o.load_state_dict(payload["optimizers"][k])
    torch.set_rng_state(payload["rng"]["torch"])
    state.sampler.set_state(payload["rng"]["sampler"])
    state.epoch = manifest["epoch"]
    state.step = manifest["step"]
    state.g_updates = manifest["g_updates"]
    state.trajectory = ScoreTrajectory([tuple(p) for p in payload["trajectory"]])
    state.reports = list(payload["reports"])
    return state


def epoch_order(config: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([config.seed, epoch]).permutation(n)


@dataclass
class RunResult:
    state: TrainState
    trajectory: ScoreTrajectory
    checkpoint: Path | None


def run_training(config: TrainConfig, train: LabeledDataset, evaluator: Evaluator | None = None,
                 out_dir: str | Path | None = None, resume: bool = False,
                 stop_after_epoch: int | None = None) -> RunResult:
    """Run the full schedule; evaluate and checkpoint at the configured cadence.

    ``train`` must already carry corrupted labels. With ``resume`` the run
    continues from ``out_dir/checkpoint.pt`` when present.
    ``stop_after_epoch`` ends the run early (after checkpointing), which is
    how interruption is simulated in tests.
    """
    train = train.training_view()
    if len(train) < config.batch_size:
        raise InvalidInputError("training set smaller than one batch")
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / CHECKPOINT_NAME if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume and ckpt_path is not None and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        if state.config.config_hash() != config.config_hash():
            raise InvalidSpecError("checkpoint belongs to a different config")
    else:
        state = TrainState(config)

    loss_log = out / "train_log.jsonl" if out is not None else None
    if loss_log is not None:
        _truncate_log(loss_log, state.step)

    while state.epoch < config.total_epochs:
        epoch = state.epoch
        state.set_lr(lr_at(epoch, config))
        state.G.train()
        state.D.train()
        rows = []
        for batch in train.batches(config.batch_size, epoch_order(config, epoch, len(train))):
            bundle = train_step(state, batch)
            rows.append({"step": state.step, **bundle.recorded()})
            if evaluator is not None and state.step % config.cls_eval_every_iters == 0:
                state.trajectory.add(state.step, "cls_test_acc", _cls_accuracy(state, evaluator))
        state.epoch += 1
        if evaluator is not None and state.epoch % config.eval_every_epochs == 0:
            report = evaluator.evaluate(state.G, state.epoch, seed=config.seed * 1000 + state.epoch)
            state.reports.append(report.as_dict())
            for name in ("ca", "fid", "is_score", "kid"):
                state.trajectory.add(state.step, name, getattr(report, name))
        if loss_log is not None:
            with open(loss_log, "a") as f:
                f.writelines(json.dumps(r) + "\n" for r in rows)
        last = state.epoch == config.total_epochs
        if ckpt_path is not None and (last or state.epoch % config.checkpoint_every_epochs == 0):
            save_checkpoint(state, ckpt_path)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch and not last:
            break

    if out is not None:
        state.trajectory.to_jsonl(out / "trajectory.jsonl")
        with open(out / "metrics.jsonl", "w") as f:
            f.writelines(json.dumps(r) + "\n" for r in state.reports)
    return RunResult(state, state.trajectory, ckpt_path)


def _cls_accuracy(state: TrainState, evaluator: Evaluator) -> float:
    state.D.eval()
    try:
        return evaluator.classifier_accuracy(state.classify)
    finally:
        state.D.train()


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in keep))


def with_noise(config: TrainConfig, kind, rate: float) -> TrainConfig:
    return replace(config, noise=NoiseSpec(NoiseKind(kind), rate, config.num_domains))
