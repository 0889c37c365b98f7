"""Adam, the alternating generator/discriminator schedule, and random search."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .autodiff import Parameter, Tape, Tensor
from .data.domains import BatchSampler, CompositeBatch, DomainDataset, MultiDomainTask, SplitSpec, split_train_val
from .errors import ConfigError, DivergenceError
from .losses import LossBreakdown, discriminator_loss, generator_objective
from .metrics import accuracy
from .model import AdrmxConfig, AdrmxParams, forward_train, predict

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[Parameter], lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for p in params:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        return state


def adam_step(state: AdamState, params: Sequence[Parameter]) -> None:
    """One bias-corrected Adam update from each parameter's ``grad``, in place."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient for parameter {p.name}", term=p.name)
        if p.grad.shape != p.value.shape:
            raise ConfigError(f"{p.name}: gradient shape {p.grad.shape} vs value {p.value.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in params:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_per_domain: int = 32
    lr_gen: float = 1e-3
    # the discriminator runs at lr_gen * disc_lr_mult unless lr_disc is set
    disc_lr_mult: float = 1.0
    lr_disc: float | None = None
    disc_steps: int = 3
    weight_decay: float = 0.0
    dropout: float = 0.0
    lam: float = 1.0
    temperature: float = 1.0
    use_remix: bool = True
    use_contrastive: bool = True
    contrastive_on: str = "both"
    dinv_uses_shared_head: bool = True
    predict_from: str = "label"
    latent_dim: int = 64
    encoder_hidden: tuple[int, ...] = (256, 128)
    disc_hidden: tuple[int, ...] = (128, 128)
    holdout_fraction: float = 0.2
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr_gen <= 0 or self.disc_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.eval_every < 1 or self.disc_steps < 1 or self.batch_per_domain < 1:
            raise ConfigError("eval_every, disc_steps and batch_per_domain must be >= 1")

    @property
    def disc_learning_rate(self) -> float:
        return self.lr_disc if self.lr_disc is not None else self.lr_gen * self.disc_lr_mult

    def model_config(self, d_in: int, num_classes: int, num_domains: int) -> AdrmxConfig:
        return AdrmxConfig(
            d_in=d_in, num_classes=num_classes, num_domains=num_domains, latent_dim=self.latent_dim,
            encoder_hidden=self.encoder_hidden, disc_hidden=self.disc_hidden, lam=self.lam,
            temperature=self.temperature, use_remix=self.use_remix, use_contrastive=self.use_contrastive,
            contrastive_on=self.contrastive_on, dinv_uses_shared_head=self.dinv_uses_shared_head,
            predict_from=self.predict_from, dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    init, sampler, remix = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "sampler": np.random.default_rng(sampler),
            "remix": np.random.default_rng(remix)}


def _int_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


@dataclass
class TrainState:
    params: AdrmxParams
    model_config: AdrmxConfig
    gen_opt: AdamState
    disc_opt: AdamState
    remix_rng: np.random.Generator
    step: int = 0
    best_val: float = -1.0
    best_step: int = -1
    best_params: dict[str, np.ndarray] | None = None

    @classmethod
    def create(cls, model_config: AdrmxConfig, config: TrainConfig) -> "TrainState":
        streams = _streams(config.seed)
        params = AdrmxParams(model_config, seed=_int_seed(streams["init"]))
        return cls(
            params=params,
            model_config=model_config,
            gen_opt=AdamState.for_params(params.generator_parameters(), config.lr_gen,
                                         weight_decay=config.weight_decay),
            disc_opt=AdamState.for_params(params.discriminator_parameters(), config.disc_learning_rate,
                                          weight_decay=config.weight_decay),
            remix_rng=streams["remix"],
        )

    def to_checkpoint(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors = {f"param/{k}": v for k, v in self.params.state_dict().items()}
        for tag, opt in (("gen", self.gen_opt), ("disc", self.disc_opt)):
            for k in opt.m:
                tensors[f"adam_{tag}/m/{k}"] = opt.m[k]
                tensors[f"adam_{tag}/v/{k}"] = opt.v[k]
        if self.best_params is not None:
            tensors.update({f"best/{k}": v for k, v in self.best_params.items()})
        meta = {
            "model_config": self.model_config.to_dict(),
            "step": self.step,
            "best_val": self.best_val,
            "best_step": self.best_step,
            "remix_rng": self.remix_rng.bit_generator.state,
            "adam": {tag: {k: getattr(opt, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")}
                     for tag, opt in (("gen", self.gen_opt), ("disc", self.disc_opt))},
        }
        return tensors, meta

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, np.ndarray], meta: dict) -> "TrainState":
        mc = AdrmxConfig.from_dict(meta["model_config"])
        params = AdrmxParams(mc)
        params.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        opts = {}
        for tag in ("gen", "disc"):
            opt = AdamState(**meta["adam"][tag])
            for k, v in tensors.items():
                if k.startswith(f"adam_{tag}/m/"):
                    opt.m[k[len(f"adam_{tag}/m/"):]] = v.copy()
                elif k.startswith(f"adam_{tag}/v/"):
                    opt.v[k[len(f"adam_{tag}/v/"):]] = v.copy()
            opts[tag] = opt
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["remix_rng"]
        best = {k[5:]: v for k, v in tensors.items() if k.startswith("best/")} or None
        return cls(params, mc, opts["gen"], opts["disc"], rng, meta["step"], meta["best_val"],
                   meta["best_step"], best)

    def save(self, path) -> None:
        checkpoint.save(path, *self.to_checkpoint())

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_checkpoint(*checkpoint.load(path))


def generator_step(state: TrainState, batch: CompositeBatch) -> LossBreakdown:
    """Forward, generator objective, backward into the generator side, Adam update."""
    tape = Tape()
    art = forward_train(state.params, batch, state.model_config, state.remix_rng, tape)
    total, parts = generator_objective(art, state.model_config)
    tape.backward(total)
    gen = state.params.generator_parameters()
    adam_step(state.gen_opt, gen)
    return parts


def detached_dinv(params: AdrmxParams, inputs: np.ndarray) -> np.ndarray:
    return params.label_encoder.numpy_forward(inputs) - params.domain_encoder.numpy_forward(inputs)


def discriminator_step(state: TrainState, batch: CompositeBatch, x_dinv: np.ndarray | None = None) -> float:
    """Cross-entropy of the discriminator on detached x_dinv; updates only the discriminator.

    Encoders are frozen here, so a caller running several discriminator steps
    on one batch can pass the precomputed ``x_dinv``.
    """
    if x_dinv is None:
        x_dinv = detached_dinv(state.params, batch.inputs)
    tape = Tape()
    logits = state.params.discriminator(Tensor(x_dinv), tape)
    loss = discriminator_loss(logits, batch.domains)
    tape.backward(loss)
    adam_step(state.disc_opt, state.params.discriminator_parameters())
    return loss.item()


class AuditLog:
    """Record of which domain's data was read, and why."""

    def __init__(self):
        self.events: list[dict] = []

    def record(self, domain_id: int, purpose: str, n: int) -> None:
        self.events.append({"seq": len(self.events), "domain_id": int(domain_id), "purpose": purpose, "n": int(n)})


def validation_accuracy(params: AdrmxParams, val_sets: Sequence[DomainDataset], from_dinv: bool = False,
                        audit: AuditLog | None = None) -> tuple[float, list[float]]:
    """Unweighted mean of the per-domain validation accuracies."""
    per = []
    for ds in val_sets:
        if audit is not None:
            audit.record(ds.domain_id, "validation", len(ds))
        per.append(accuracy(predict(params, ds.inputs, from_dinv), ds.labels))
    return float(np.mean(per)), per


def split_sources(sources: Sequence[DomainDataset], holdout_fraction: float,
                  seed: int) -> tuple[list[DomainDataset], list[DomainDataset]]:
    train, val = [], []
    for ds in sources:
        split_seed = int(np.random.SeedSequence([seed, ds.domain_id]).generate_state(1)[0])
        tr, va = split_train_val(ds, SplitSpec(holdout_fraction, split_seed))
        train.append(tr)
        val.append(va)
    return train, val


@dataclass
class RunRecord:
    config: dict
    seed: int
    source_domains: list[int]
    status: str = "running"
    steps_completed: int = 0
    losses: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    disc_losses: list[float] = field(default_factory=list)
    best_step: int = -1
    best_val_acc: float = -1.0
    error: dict | None = None
    batch_digest: str = ""
    checkpoint_path: str | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except wall-clock time."""
        d = self.to_dict()
        d.pop("wall_clock")
        return d

    def metrics_lines(self) -> list[dict]:
        """One object per step: loss breakdown plus val_acc on evaluated steps."""
        evals = {h["step"]: h["val_acc"] for h in self.history}
        out = []
        for rec in self.losses:
            row = dict(rec)
            if rec["step"] in evals:
                row["val_acc"] = evals[rec["step"]]
            out.append(row)
        return out


def train_loop(task: MultiDomainTask, config: TrainConfig, audit: AuditLog | None = None,
               on_step: Callable[[int, LossBreakdown], None] | None = None) -> tuple[TrainState, RunRecord]:
    """Alternate generator and discriminator steps on the task's source domains.

    The target domain (``task.target``) is never touched. Every
    ``eval_every`` steps (and after the last step) the mean source-validation
    accuracy is computed and the best parameters are kept; ties keep the
    earlier step. On divergence the run stops, the error is recorded and
    ``state.params`` are the last finite parameters.
    """
    t0 = time.perf_counter()
    sources = task.sources
    if len(sources) < 2:
        raise ConfigError("training needs at least 2 source domains")
    train_sets, val_sets = split_sources(sources, config.holdout_fraction, config.seed)
    mc = config.model_config(task.d_in, task.num_classes, len(sources))
    state = TrainState.create(mc, config)
    streams = _streams(config.seed)
    sampler = BatchSampler(train_sets, config.batch_per_domain, seed=_int_seed(streams["sampler"]))
    record = RunRecord(config=config.to_dict(), seed=config.seed, source_domains=[d.domain_id for d in sources])
    digest = hashlib.sha256()
    from_dinv = config.predict_from == "dinv"

    def evaluate(step: int) -> None:
        acc, per = validation_accuracy(state.params, val_sets, from_dinv, audit)
        record.history.append({"step": step, "val_acc": acc, "per_domain": per})
        if acc > state.best_val:
            state.best_val, state.best_step = acc, step
            state.best_params = state.params.state_dict()

    try:
        for step in range(1, config.steps + 1):
            batch = sampler.next()
            if audit is not None:
                for ds, rows in zip(train_sets, batch.rows):
                    audit.record(ds.domain_id, "train", rows.size)
            for rows in batch.rows:
                digest.update(rows.astype("<i8").tobytes())
            snapshot = state.params.state_dict()
            try:
                parts = generator_step(state, batch)
                x_dinv = detached_dinv(state.params, batch.inputs)
                for _ in range(config.disc_steps):
                    record.disc_losses.append(discriminator_step(state, batch, x_dinv))
            except DivergenceError:
                state.params.load_state_dict(snapshot)
                raise
            state.step = step
            record.losses.append(parts.to_record(step))
            record.steps_completed = step
            if on_step is not None:
                on_step(step, parts)
            if step % config.eval_every == 0 or step == config.steps:
                evaluate(step)
        record.status = "completed"
    except DivergenceError as exc:
        logger.error("training diverged at step %d: %s", state.step + 1, exc)
        record.status = "diverged"
        record.error = {"step": state.step + 1, "term": exc.term, "message": str(exc)}
    record.best_step = state.best_step
    record.best_val_acc = state.best_val
    record.batch_digest = digest.hexdigest()
    record.wall_clock = time.perf_counter() - t0
    return state, record


def best_params(state: TrainState) -> AdrmxParams:
    """Parameters of the selected (best validation) checkpoint."""
    if state.best_params is None:
        return state.params
    p = AdrmxParams(state.model_config)
    p.load_state_dict(state.best_params)
    return p


# name -> ("log_uniform", lo, hi) | ("uniform", lo, hi) | ("choice", [values])
DEFAULT_SEARCH_SPACE: dict[str, tuple] = {
    "lr_gen": ("log_uniform", 3e-4, 3e-3),
    "lam": ("log_uniform", 0.01, 10.0),
    "temperature": ("choice", [0.1, 0.5, 1.0]),
    "batch_per_domain": ("choice", [16, 32, 64]),
}


def sample_config(space: dict[str, tuple], base: TrainConfig, rng: np.random.Generator) -> TrainConfig:
    overrides = {}
    for name in sorted(space):
        kind, *args = space[name]
        if kind == "log_uniform":
            lo, hi = args
            overrides[name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        elif kind == "uniform":
            lo, hi = args
            overrides[name] = float(rng.uniform(lo, hi))
        elif kind == "choice":
            values = args[0]
            overrides[name] = values[int(rng.integers(len(values)))]
        else:
            raise ConfigError(f"unknown search distribution {kind!r} for {name}")
    return replace(base, **overrides)


@dataclass
class SearchResult:
    trials: list[dict]
    records: list[RunRecord]
    selected: dict | None
    selected_index: int | None


def random_search(task: MultiDomainTask, base: TrainConfig, n_trials: int, seeds: Sequence[int] = (0, 1, 2),
                  space: dict[str, tuple] | None = None, sweep_seed: int = 0,
                  runner: Callable | None = None) -> SearchResult:
    """Sample ``n_trials`` configs, train each on every seed, pick the best mean validation accuracy.

    A trial with any diverged seed is marked failed and cannot be selected.
    Ties keep the earlier trial. ``runner`` maps a list of (task, config)
    jobs to (state, record) pairs and defaults to running them in order.
    """
    if n_trials < 1:
        raise ConfigError(f"n_trials must be >= 1, got {n_trials}")
    space = DEFAULT_SEARCH_SPACE if space is None else space
    rng = np.random.default_rng(sweep_seed)
    configs = [sample_config(space, base, rng) for _ in range(n_trials)]
    jobs = [(task, replace(cfg, seed=s)) for cfg in configs for s in seeds]
    run = runner or (lambda js: [train_loop(t, c) for t, c in js])
    results = run(jobs)
    records = [rec for _, rec in results]
    trials = []
    best, best_i = -1.0, None
    for i, cfg in enumerate(configs):
        recs = records[i * len(seeds):(i + 1) * len(seeds)]
        ok = all(r.status == "completed" for r in recs)
        mean_val = float(np.mean([r.best_val_acc for r in recs])) if ok else None
        trials.append({"trial": i, "config": cfg.to_dict(), "status": "completed" if ok else "failed",
                       "mean_val_acc": mean_val, "seeds": list(seeds)})
        if ok and mean_val > best:
            best, best_i = mean_val, i
    selected = None if best_i is None else trials[best_i]["config"]
    return SearchResult(trials, records, selected, best_i)
