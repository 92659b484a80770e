"""End-to-end training: mixed-domain batch sampling, adaptive gradient descent
on the combined objective, hyperparameter grid search, and run reporting.

A run directory holds a resolved config snapshot, a one-record-per-step loss
log, per-epoch evaluation metrics, and the final checkpoint. All artifacts are
deterministic for a given seed; wall-clock timing is kept out of them and
reported separately.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .datagen import DomainDataset, derive_seed
from .evaluation import evaluate
from .losses import (
    ContrastiveConfig,
    PAIRING_DOMAIN_SEPARATED,
    class_means,
    contrastive_loss,
    span_cross_entropy,
    total_loss,
)
from .model import EncoderConfig, SpanModel, TokenizationError, TokenizedSample, tokenize_sample

log = logging.getLogger(__name__)

MIX_MIXED = "mixed"
MIX_SOURCE_ONLY = "source-only"


class ConfigError(ValueError):
    """Invalid training configuration; message lists one problem per line."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last finite step index."""

    def __init__(self, message: str, last_finite_step: int, report: "TrainReport | None" = None):
        super().__init__(message)
        self.last_finite_step = last_finite_step
        self.report = report


@dataclass(frozen=True)
class OptimizerConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled; off by default
    warmup_steps: int = 0  # none by default


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 2
    batch_size: int = 16
    mixing_policy: str = MIX_MIXED
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    max_answer_len: int = 48
    eval_cadence: int = 1  # epochs between dev evaluations; 0 disables
    grad_clip: float = 1.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> list[str]:
        problems = []
        if self.learning_rate <= 0:
            problems.append("learning_rate: must be > 0")
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.mixing_policy not in (MIX_MIXED, MIX_SOURCE_ONLY):
            problems.append(f"mixing_policy: unknown policy {self.mixing_policy!r}")
        if self.mixing_policy == MIX_MIXED and self.batch_size < 2:
            problems.append("batch_size: must be >= 2 under the mixed 1:1 policy")
        if (self.contrastive.pairing_variant == PAIRING_DOMAIN_SEPARATED
                and self.batch_size < 2):
            problems.append("batch_size: must be >= 2 with domain-separated pairing")
        if self.max_answer_len < 1:
            problems.append("max_answer_len: must be >= 1")
        if self.eval_cadence < 0:
            problems.append("eval_cadence: must be >= 0")
        if self.grad_clip <= 0:
            problems.append("grad_clip: must be > 0")
        return problems

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ConfigError("\n".join(problems))


@dataclass
class StepRecord:
    step: int
    loss_ce: float
    loss_con: float
    loss_total: float


@dataclass
class TrainReport:
    steps: list[StepRecord]
    epoch_metrics: list[dict]
    wall_clock_s: float
    seed: int
    resolved_config: dict
    final_epoch_mean_loss: float


class AdamW:
    """Decoupled-weight-decay adaptive optimizer with bias correction."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, config: OptimizerConfig):
        self.lr = lr
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, T.Tensor]) -> None:
        b1, b2 = self.config.betas
        self.t += 1
        lr = self.lr
        if self.config.warmup_steps > 0:
            lr = lr * min(1.0, self.t / self.config.warmup_steps)
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.config.eps)
                            + self.config.weight_decay * p.data)


def clip_gradients(params: dict[str, T.Tensor], cap: float) -> float:
    """Scale all gradients so the global norm is at most cap; returns the
    pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > cap:
        scale = cap / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def mixed_batch_sampler(
    source: Sequence,
    synthetic: Sequence,
    batch_size: int,
    policy: str,
    seed: int,
    epochs: int = 1,
) -> Iterator[tuple[int, list]]:
    """Yield (epoch, batch) pairs. Under the mixed policy every batch holds
    both domains at a 1:1 ratio (rounded toward source) while both last; each
    epoch is one reshuffled pass visiting every item exactly once."""
    if policy not in (MIX_MIXED, MIX_SOURCE_ONLY):
        raise ConfigError(f"mixing_policy: unknown policy {policy!r}")
    if policy == MIX_MIXED:
        if batch_size < 2:
            raise ConfigError("batch_size: must be >= 2 under the mixed 1:1 policy")
        if len(source) == 0 or len(synthetic) == 0:
            raise ConfigError("mixed policy requires non-empty source and synthetic sets")
    elif len(source) == 0:
        raise ConfigError("source dataset is empty")

    n_src = (batch_size + 1) // 2
    n_syn = batch_size // 2
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4, epoch]))
        src = [source[i] for i in rng.permutation(len(source))]
        if policy == MIX_SOURCE_ONLY:
            for i in range(0, len(src), batch_size):
                yield epoch, src[i:i + batch_size]
            continue
        syn = [synthetic[i] for i in rng.permutation(len(synthetic))]
        si = ti = 0
        while si < len(src) or ti < len(syn):
            batch = src[si:si + n_src] + syn[ti:ti + n_syn]
            si = min(si + n_src, len(src))
            ti = min(ti + n_syn, len(syn))
            # one side exhausted: fill the batch from the other
            while len(batch) < batch_size and si < len(src):
                batch.append(src[si])
                si += 1
            while len(batch) < batch_size and ti < len(syn):
                batch.append(syn[ti])
                ti += 1
            yield epoch, batch


def tokenize_dataset(dataset: DomainDataset, domain_tag: str, max_len: int) -> list[TokenizedSample]:
    """Tokenize every sample; untokenizable samples are skipped with a count."""
    out = []
    skipped = 0
    for s in dataset.samples:
        try:
            out.append(
                tokenize_sample(s.question, s.context, s.answer_start, s.answer_text,
                                domain_tag=domain_tag, max_len=max_len, sample_id=s.sample_id)
            )
        except TokenizationError:
            skipped += 1
    if skipped:
        log.warning("tokenize_dataset: skipped %d untokenizable sample(s)", skipped)
    return out


def _batch_losses(model: SpanModel, batch, config: TrainConfig, step: int):
    """Cross-entropy and contrastive terms of one mixed batch."""
    cc = config.contrastive
    ce_terms = []
    means = []
    for i, ts in enumerate(batch):
        noise_seed = derive_seed(config.seed, 0x401535, step, i)
        features = model.encode(ts, noise_sigma=cc.noise_sigma, noise_seed=noise_seed)
        logits = model.span_logits(features)
        ce_terms.append(span_cross_entropy(logits, ts.answer_span))
        means.append(class_means(features, ts))
    ce = T.stack_rows(ce_terms).mean()
    con = contrastive_loss(means, cc)
    return ce, con


def train(
    config: TrainConfig,
    source: DomainDataset,
    synthetic: DomainDataset | None = None,
    dev_sets: dict[str, DomainDataset] | None = None,
    run_dir: Path | str | None = None,
    initial_model: SpanModel | None = None,
) -> tuple[SpanModel, TrainReport]:
    """Gradient descent on the combined objective over mixed batches. Emits the
    final checkpoint and a full report; aborts with the last finite step on a
    non-finite loss. ``initial_model`` warm-starts from an existing checkpoint
    instead of a fresh initialization (optimizer state starts fresh)."""
    started = time.perf_counter()
    dev_sets = dev_sets or {}
    src_tok = tokenize_dataset(source, "source", config.encoder.max_len)
    syn_tok = (tokenize_dataset(synthetic, "target_synthetic", config.encoder.max_len)
               if synthetic is not None and len(synthetic) else [])
    if not src_tok:
        raise ConfigError("source dataset has no tokenizable samples")
    policy = config.mixing_policy if syn_tok else MIX_SOURCE_ONLY

    if initial_model is not None:
        if initial_model.config != config.encoder:
            raise ConfigError("initial model config does not match encoder config")
        model = SpanModel(config.encoder, _params={
            name: T.Tensor(p.data.copy(), requires_grad=True)
            for name, p in initial_model.params.items()
        })
    else:
        model = SpanModel(config.encoder)
    optimizer = AdamW(model.params, config.learning_rate, config.optimizer)
    steps: list[StepRecord] = []
    epoch_metrics: list[dict] = []
    beta = config.contrastive.beta

    last_epoch_first_step = 0

    def build_report() -> TrainReport:
        tail = [r.loss_total for r in steps[last_epoch_first_step:]]
        return TrainReport(
            steps=steps,
            epoch_metrics=epoch_metrics,
            wall_clock_s=time.perf_counter() - started,
            seed=config.seed,
            resolved_config=config_to_dict(config),
            final_epoch_mean_loss=float(np.mean(tail)) if tail else float("nan"),
        )

    step = 0
    current_epoch = -1
    for epoch, batch in mixed_batch_sampler(src_tok, syn_tok, config.batch_size,
                                            policy, config.seed, epochs=config.epochs):
        if epoch != current_epoch:
            if current_epoch >= 0:
                _maybe_evaluate(model, dev_sets, config, current_epoch, epoch_metrics)
            current_epoch = epoch
            last_epoch_first_step = step
        try:
            ce, con = _batch_losses(model, batch, config, step)
            loss = total_loss(ce, con, config.contrastive)
            l_ce, l_con, l_qa = ce.item(), con.item(), loss.item()
            # decomposition identity, recomputed independently of the graph
            assert abs(l_qa - (l_ce + beta * l_con)) <= 1e-12
            model.zero_grad()
            T.backward(loss)
        except T.NonFiniteError as err:
            raise DivergenceError(
                f"non-finite loss at step {step}: {err}", step - 1, build_report()
            ) from err
        clip_gradients(model.params, config.grad_clip)
        optimizer.step(model.params)
        steps.append(StepRecord(step=step, loss_ce=l_ce, loss_con=l_con, loss_total=l_qa))
        step += 1
    _maybe_evaluate(model, dev_sets, config, current_epoch, epoch_metrics)

    report = build_report()
    if run_dir is not None:
        write_run_dir(Path(run_dir), model, config, report)
    return model, report


def _maybe_evaluate(model, dev_sets, config, epoch, epoch_metrics):
    if config.eval_cadence == 0 or (epoch + 1) % config.eval_cadence != 0:
        return
    for name, ds in dev_sets.items():
        result = evaluate(model, ds, config.max_answer_len)
        epoch_metrics.append(
            {"epoch": epoch, "dataset": name, "em": result.em, "f1": result.f1, "n": result.n}
        )


# -- config (de)serialization ----------------------------------------------------

def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["optimizer"]["betas"] = list(config.optimizer.betas)
    kernel = d["contrastive"]["kernel"]
    if kernel["bandwidths"] is not None:
        kernel["bandwidths"] = list(kernel["bandwidths"])
    kernel["median_multipliers"] = list(kernel["median_multipliers"])
    return d


def config_from_dict(d: dict) -> TrainConfig:
    from .losses import KernelConfig

    d = dict(d)
    problems = []
    known = {f for f in TrainConfig.__dataclass_fields__}
    for key in d:
        if key not in known:
            problems.append(f"{key}: unknown field")
    if problems:
        raise ConfigError("\n".join(problems))
    try:
        if "optimizer" in d:
            opt = dict(d["optimizer"])
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            d["optimizer"] = OptimizerConfig(**opt)
        if "contrastive" in d:
            con = dict(d["contrastive"])
            if "kernel" in con:
                ker = dict(con["kernel"])
                if ker.get("bandwidths") is not None:
                    ker["bandwidths"] = tuple(ker["bandwidths"])
                if "median_multipliers" in ker:
                    ker["median_multipliers"] = tuple(ker["median_multipliers"])
                con["kernel"] = KernelConfig(**ker)
            d["contrastive"] = ContrastiveConfig(**con)
        if "encoder" in d:
            d["encoder"] = EncoderConfig(**d["encoder"])
        return TrainConfig(**d)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def write_run_dir(run_dir: Path, model: SpanModel, config: TrainConfig, report: TrainReport) -> None:
    """Persist the run: config snapshot, step log, epoch metrics, checkpoint,
    and a timing report (the only non-deterministic file)."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config_to_dict(config), indent=1, sort_keys=True) + "\n")
    with open(run_dir / "steps.jsonl", "w") as fh:
        for r in report.steps:
            fh.write(json.dumps({"step": r.step, "loss_ce": r.loss_ce,
                                 "loss_con": r.loss_con, "loss_total": r.loss_total}) + "\n")
    (run_dir / "metrics.json").write_text(json.dumps(report.epoch_metrics, indent=1) + "\n")
    model.save(run_dir / "checkpoint.bin")
    (run_dir / "report.json").write_text(json.dumps({
        "seed": report.seed,
        "wall_clock_s": report.wall_clock_s,
        "final_epoch_mean_loss": report.final_epoch_mean_loss,
        "n_steps": len(report.steps),
    }, indent=1) + "\n")


# -- grid search -------------------------------------------------------------------

CRITERIA = ("dev_f1", "dev_em", "train_loss")


@dataclass
class GridResult:
    best_beta: float
    best_sigma: float
    rows: list[dict]


def grid_search(
    base: TrainConfig,
    beta_grid: Sequence[float],
    sigma_grid: Sequence[float],
    criterion: str,
    source: DomainDataset,
    synthetic: DomainDataset | None,
    selection: DomainDataset,
) -> GridResult:
    """Train one model per (beta, sigma) cell with a shared seed, score each on
    the selection set, and pick the best; ties prefer smaller beta, then sigma.
    Failed cells are recorded and skipped."""
    if criterion not in CRITERIA:
        raise ConfigError(f"criterion: unknown criterion {criterion!r}")
    if not beta_grid or not sigma_grid:
        raise ConfigError("grids must be non-empty")
    rows = []
    for beta in beta_grid:
        for sigma in sigma_grid:
            config = replace(
                base, contrastive=replace(base.contrastive, beta=beta, noise_sigma=sigma)
            )
            row = {"beta": beta, "sigma": sigma, "status": "ok"}
            try:
                model, report = train(config, source, synthetic)
                result = evaluate(model, selection, config.max_answer_len)
                row.update(em=result.em, f1=result.f1,
                           train_loss=report.final_epoch_mean_loss)
            except (DivergenceError, T.NonFiniteError) as err:
                log.warning("grid cell beta=%g sigma=%g failed: %s", beta, sigma, err)
                row["status"] = "failed"
            rows.append(row)

    def score(row):
        if criterion == "dev_f1":
            return -row["f1"]
        if criterion == "dev_em":
            return -row["em"]
        return row["train_loss"]

    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise DivergenceError("every grid cell failed", -1, None)  # type: ignore[arg-type]
    best = min(ok, key=lambda r: (score(r), r["beta"], r["sigma"]))
    return GridResult(best_beta=best["beta"], best_sigma=best["sigma"], rows=rows)
