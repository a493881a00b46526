"""Adam training loop, held-out evaluation, gradient checking, and the
two scripted ablations (fusion probability sweep, trained vs frozen
conversation seed).

Training minimizes mean per-token negative log-likelihood with teacher
forcing.  Fusion dropout variates are drawn fresh each step from a
dedicated generator stream, so a run is fully determined by the seed:
same seed and config reproduce the loss curve bit for bit at 64-bit
precision.  Each epoch the model greedy-decodes the validation split,
the scores go to an append-only JSONL log, and the best checkpoint by
validation BLEU-4 is kept.  A non-finite loss or gradient halts the run
immediately; the checkpoints written up to that point stay untouched.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_model, save_model
from .data import EOS, DialogueSample, Utterance
from .errors import ConfigError, ContractError, NumericsError
from .metrics import bleu, nist
from .model import Model, ModelConfig, batch_loss, generate_greedy
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

# the trainable conversation-start seed; the only tensor the "fixed"
# history mode exempts from updates
HISTORY_PARAM = "enc.history.h"


@dataclass
class TrainConfig:
    """Optimization settings plus the full model shape.

    ``history_mode="fixed"`` freezes the conversation-start history
    parameter and nothing else.  ``dropout_granularity`` controls
    whether fusion variates are drawn once per step or per sample.
    """

    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    precision: int = 64
    history_mode: str = "trained"
    dropout_granularity: str = "step"
    warmup_steps: int = 300
    target_bleu4: float | None = None

    vocab_size: int = 200
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    p_net: float = 0.4
    h_len: int = 16
    d_img: int = 64
    max_images: int = 4
    max_len: int = 16
    context_size: int = 2
    tie_output: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if self.history_mode not in ("trained", "fixed"):
            raise ConfigError(f"unknown history_mode {self.history_mode!r}")
        if self.dropout_granularity not in ("step", "sample"):
            raise ConfigError(
                f"unknown dropout_granularity {self.dropout_granularity!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")
        self.model_config()  # validate shape fields eagerly

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(blob) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**blob)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m:{k}": v for k, v in self.m.items()}
        out.update({f"v:{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_named_arrays(cls, blobs: dict[str, np.ndarray], t: int) -> "AdamState":
        m = {k[2:]: v for k, v in blobs.items() if k.startswith("m:")}
        v = {k[2:]: v for k, v in blobs.items() if k.startswith("v:")}
        return cls(m=m, v=v, t=t)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              skip: frozenset[str] = frozenset()) -> None:
    """One bias-corrected Adam update in place.

    Scans every gradient first and raises before mutating anything if
    one is missing or non-finite, so an aborted step leaves parameters
    and moments exactly as they were.
    """
    grads = {}
    for name, p in params.items():
        if name in skip:
            continue
        if p.grad is None:
            raise ContractError(f"no gradient for {name!r}; run backward first")
        if not np.isfinite(p.grad).all():
            raise NumericsError(f"non-finite gradient in {name!r}")
        grads[name] = p.grad

    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def evaluate(model: Model, samples: list[DialogueSample]) -> dict:
    """Greedy-decode every sample and score against the gold responses."""
    if not samples:
        raise ContractError("evaluate over zero samples")
    cands = [generate_greedy(model, s.utterances(),
                             conversation_start=s.conversation_start)
             for s in samples]
    refs = [s.response for s in samples]
    b = bleu(cands, refs)
    return {"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
            "nist": nist(cands, refs), "n": len(samples)}


@dataclass
class TrainResult:
    epochs_run: int = 0
    steps: int = 0
    loss_curve: list[float] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    best_bleu4: float = float("-inf")
    best_epoch: int = -1
    checkpoint_path: str | None = None
    halted: str | None = None
    wall_time_s: float = 0.0


def _draw_us(rng, config: TrainConfig, n_samples: int):
    """Fusion variates for one step: (us, per_sample_us)."""
    if config.p_net == 0.0:
        return None, None
    if config.dropout_granularity == "sample":
        return None, [rng.random(config.n_layers).tolist() for _ in range(n_samples)]
    return rng.random(config.n_layers).tolist(), None


def train(config: TrainConfig, train_samples: list[DialogueSample],
          valid_samples: list[DialogueSample] | None = None,
          out_dir=None, log_path=None,
          resume_from=None) -> tuple[Model, TrainResult]:
    """Run the full loop and return the final in-memory model plus a result
    summary.  ``out_dir`` enables checkpointing: ``best.ckpt`` by validation
    BLEU-4 and ``last.ckpt`` per epoch (also the resume point).
    """
    if not train_samples:
        raise ContractError("training corpus is empty")
    T.set_default_dtype(config.precision)

    start_epoch = 1
    if resume_from is not None:
        model, ckpt = load_model(resume_from)
        state = AdamState.from_named_arrays(ckpt.optimizer, ckpt.extra["adam_t"])
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        step = ckpt.step
        start_epoch = ckpt.extra["epoch"] + 1
        logger.info("resumed from %s at epoch %d", resume_from, start_epoch)
    else:
        model = Model.init(config.model_config(), seed=config.seed)
        state = AdamState.for_params(model.named_tensors())
        rng = np.random.default_rng([config.seed, 0x7E41])
        step = 0

    params = model.named_tensors()
    skip = frozenset({HISTORY_PARAM}) if config.history_mode == "fixed" else frozenset()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    result = TrainResult(steps=step)
    t0 = time.monotonic()
    try:
        for epoch in range(start_epoch, config.epochs + 1):
            order = rng.permutation(len(train_samples))
            epoch_losses = []
            for lo in range(0, len(order), config.batch_size):
                batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
                us, per_sample_us = _draw_us(rng, config, len(batch))
                lr_t = config.lr
                if config.warmup_steps:
                    lr_t *= min(1.0, (step + 1) / config.warmup_steps)
                try:
                    for p in params.values():
                        p.grad = None
                    with Tape() as tape:
                        loss, _ = batch_loss(model, batch, training=True,
                                             us=us, per_sample_us=per_sample_us)
                        loss_val = loss.item()
                        if not math.isfinite(loss_val):
                            raise NumericsError(f"non-finite loss at step {step}")
                        tape.backward(loss)
                    # a parameter the sampled fusion branches kept out of the
                    # graph this step has a true gradient of zero
                    for p in params.values():
                        if p.grad is None:
                            p.grad = np.zeros_like(p.data)
                    adam_step(params, state, lr_t, skip=skip)
                except NumericsError as e:
                    result.halted = f"step {step}: {e}"
                    logger.error("halting: %s", result.halted)
                    return model, result
                step += 1
                result.steps = step
                epoch_losses.append(loss_val)
                result.loss_curve.append(loss_val)

            result.epochs_run = epoch
            row = {"step": step, "epoch": epoch,
                   "loss": float(np.mean(epoch_losses))}
            if valid_samples:
                row.update(evaluate(model, valid_samples))
            result.epoch_metrics.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()

            if out_dir is not None:
                extra = {"adam_t": state.t, "epoch": epoch,
                         "train_config": config.to_dict()}
                save_model(out_dir / "last.ckpt", model, step=step, rng=rng,
                           extra=extra, optimizer=state.named_arrays())
            if valid_samples and row["bleu4"] > result.best_bleu4:
                result.best_bleu4 = row["bleu4"]
                result.best_epoch = epoch
                if out_dir is not None:
                    extra = {"adam_t": state.t, "epoch": epoch,
                             "train_config": config.to_dict(),
                             "valid_bleu4": row["bleu4"]}
                    save_model(out_dir / "best.ckpt", model, step=step, rng=rng,
                               extra=extra, optimizer=state.named_arrays())
                    result.checkpoint_path = str(out_dir / "best.ckpt")
            if (config.target_bleu4 is not None and valid_samples
                    and row["bleu4"] >= config.target_bleu4):
                logger.info("validation BLEU-4 %.2f reached target %.2f at epoch %d",
                            row["bleu4"], config.target_bleu4, epoch)
                break
    finally:
        result.wall_time_s = time.monotonic() - t0
        if log_fh:
            log_fh.close()
    return model, result


def finite_difference_report(make_loss, params: dict[str, Tensor],
                             h: float = 1e-5, floor: float = 1e-8) -> dict:
    """Compare tape gradients of ``make_loss()`` against central finite
    differences for every entry of every named tensor."""
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        tape.backward(make_loss())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    worst_param = None
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.abs(a) + np.abs(numeric), floor)
        err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
        per_param[name] = err
        if err > worst:
            worst, worst_param = err, name
    return {"max_rel_err": worst, "worst_param": worst_param,
            "per_param": per_param}


def _gradcheck_samples(config: ModelConfig, rng) -> list[DialogueSample]:
    """Two fixed samples exercising images, the no-image fallback, and the
    conversation-start history seed."""
    def toks(n):
        return rng.integers(5, config.vocab_size, size=n).tolist()

    def images(n):
        return rng.standard_normal((n, config.d_img))

    with_images = DialogueSample(
        context=[Utterance("user", toks(4), images(0)),
                 Utterance("system", toks(3), images(1))],
        query=Utterance("user", toks(3), images(2)),
        response=[*toks(4), EOS],
        conversation_start=True)
    text_only = DialogueSample(
        context=[Utterance("user", toks(3), images(0))],
        query=Utterance("user", toks(2), images(0)),
        response=[*toks(3), EOS],
        conversation_start=True)
    return [with_images, text_only]


def grad_check(config: TrainConfig | None = None, h: float = 3e-5,
               tolerance: float = 1e-4) -> dict:
    """Finite-difference check of the whole model at a tiny width.

    Forces 64-bit precision and p_net=0 (the averaged fusion path keeps
    the loss deterministic).  Widths above 16 are rejected: the check is
    quadratic in parameter count and a wide model adds nothing.
    """
    if config is None:
        config = TrainConfig(vocab_size=24, n_layers=2, d_model=8, n_heads=2,
                             d_ff=16, h_len=3, d_img=6, max_images=3,
                             max_len=12, context_size=2, p_net=0.0)
    if config.d_model > 16:
        raise ConfigError(
            f"gradient check wants d_model <= 16, got {config.d_model}")
    config = replace(config, p_net=0.0, precision=64)
    T.set_default_dtype(64)

    model = Model.init(config.model_config(), seed=config.seed)
    samples = _gradcheck_samples(model.config, np.random.default_rng(config.seed))
    params = model.named_tensors()

    def make_loss():
        return batch_loss(model, samples, training=True)[0]

    t0 = time.monotonic()
    report = finite_difference_report(make_loss, params, h=h)
    report["runtime_s"] = time.monotonic() - t0
    report["n_parameters"] = int(sum(p.data.size for p in params.values()))
    report["tolerance"] = tolerance
    report["passed"] = report["max_rel_err"] < tolerance
    return report


PNET_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def ablate_pnet(config: TrainConfig, train_samples, valid_samples,
                grid=PNET_GRID, seeds=(0, 1, 2)) -> list[dict]:
    """Train one model per (fusion probability, seed); report the best
    validation BLEU-4 per cell and the median across seeds."""
    rows = []
    for p in grid:
        scores = []
        for seed in seeds:
            cfg = replace(config, p_net=p, seed=seed)
            _, result = train(cfg, train_samples, valid_samples)
            scores.append(result.best_bleu4)
        rows.append({"p_net": p, "bleu4_by_seed": scores,
                     "median_bleu4": float(np.median(scores))})
        logger.info("p_net=%.1f median BLEU-4 %.2f", p, rows[-1]["median_bleu4"])
    return rows


def ablate_history(config: TrainConfig, train_samples, valid_samples,
                   seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    """Trained vs frozen conversation seed, same init per seed, so the
    comparison is isolated to the freeze flag."""
    rows = []
    for seed in seeds:
        cell = {"seed": seed}
        for mode in ("trained", "fixed"):
            cfg = replace(config, history_mode=mode, seed=seed)
            _, result = train(cfg, train_samples, valid_samples)
            cell[f"{mode}_bleu4"] = result.best_bleu4
        cell["margin"] = cell["trained_bleu4"] - cell["fixed_bleu4"]
        rows.append(cell)
        logger.info("seed %d: trained %.2f vs fixed %.2f", seed,
                    cell["trained_bleu4"], cell["fixed_bleu4"])
    return rows
