"""Fine-tuning loop, warmup/decay schedule, evaluation and gradient checking.

Batch order and dropout masks are pure functions of ``(seed, step)``, so a
run resumed from a checkpoint follows the same trajectory as an
uninterrupted one.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from dualqa.datakit import SqaExample, prepare
from dualqa.metrics import EvalResult, evaluate
from dualqa.model import (
    ModelInput,
    SpanModel,
    backward,
    collate,
    decode_span,
    load_tensors,
    save_tensors,
    span_loss,
)
from dualqa.unitizer import IndexSpan, TimeSpan, index_to_time

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 500
    max_answer_len: int = 64
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class TrainingDiverged(FloatingPointError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.peak_lr
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices for 0-based ``step``: consecutive slices of seeded per-epoch permutations."""
    flat = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs, within = flat // n, flat % n
    out = np.empty(batch_size, dtype=np.int64)
    for ep in np.unique(epochs):
        perm = np.random.default_rng([seed, int(ep)]).permutation(n)
        sel = epochs == ep
        out[sel] = perm[within[sel]]
    return out


def _dropout_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**63)


def make_optimizer(model: SpanModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=0.0, betas=cfg.betas, eps=1e-8)


# -- inference --------------------------------------------------------------


@torch.no_grad()
def predict_index_spans(model: SpanModel, inputs: Sequence[ModelInput], max_answer_len: int = 64, batch_size: int = 32) -> list[IndexSpan]:
    """Dense-unit passage spans (not token positions) for prepared inputs."""
    was_training = model.training
    model.eval()
    out = []
    for lo in range(0, len(inputs), batch_size):
        chunk = inputs[lo:lo + batch_size]
        b = collate(chunk, model.config.pad)
        start, end = model(b.tokens, b.valid, b.global_mask)
        for i, inp in enumerate(chunk):
            n = inp.tokens.size
            tok = decode_span(start[i, :n], end[i, :n], inp.passage_mask, max_answer_len)
            out.append(IndexSpan(tok.start_idx - inp.passage_offset, tok.end_idx - inp.passage_offset))
    model.train(was_training)
    return out


def predict_spans(model: SpanModel, examples: Sequence[SqaExample], max_answer_len: int = 64, batch_size: int = 32) -> dict[str, TimeSpan]:
    inputs = [prepare(e, model.config, training=False) for e in examples]
    spans = predict_index_spans(model, inputs, max_answer_len, batch_size)
    return {e.id: index_to_time(s, e.passage) for e, s in zip(examples, spans)}


def evaluate_model(model: SpanModel, examples: Sequence[SqaExample], max_answer_len: int = 64) -> EvalResult:
    preds = predict_spans(model, examples, max_answer_len)
    golds = {e.id: e.answer for e in examples}
    period = examples[0].passage.frame_period if examples else 0.02
    return evaluate(preds, golds, period)


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: SpanModel
    log: list[dict]
    best_step: int
    best_ff1: float | None
    steps_done: int = 0


def _all_finite(model: SpanModel) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def _optimize(
    model: SpanModel,
    n_items: int,
    batch_loss: Callable[[np.ndarray], torch.Tensor],
    cfg: TrainConfig,
    on_eval: Callable[[int], float] | None = None,
    log_path=None,
    checkpoint_path=None,
    resume_from=None,
    stop_after: int | None = None,
) -> TrainResult:
    opt = make_optimizer(model, cfg)
    start_step, best_step, best_ff1, best_state = 0, 0, None, None
    records: list[dict] = []
    if resume_from is not None:
        start_step, best_step, best_ff1, best_state = _restore(resume_from, model, opt)
    log_fh = open(log_path, "a") if log_path else None
    end_step = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    model.train()
    try:
        for step in range(start_step, end_step):
            lr = lr_at(step + 1, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            torch.manual_seed(_dropout_seed(cfg.seed, step))
            idx = batch_indices(step, n_items, cfg.batch_size, cfg.seed)
            loss = batch_loss(idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step + 1} (lr={lr:.3g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if not _all_finite(model):
                raise TrainingDiverged(f"non-finite parameters after step {step + 1} (loss={loss.item():.4g})")
            rec = {"step": step + 1, "loss": float(loss.item()), "lr": lr}
            if on_eval is not None and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps):
                ff = on_eval(step + 1)
                model.train()
                rec["eval_ff1"] = ff
                if best_ff1 is None or ff > best_ff1:
                    best_ff1, best_step = ff, step + 1
                    best_state = copy.deepcopy(model.state_dict())
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    done = end_step
    if checkpoint_path is not None:
        _save_state(checkpoint_path, model, opt, done, best_step, best_ff1, best_state)
    if best_state is not None and done == cfg.total_steps:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, records, best_step or done, best_ff1, done)


def _save_state(path, model, opt, step, best_step, best_ff1, best_state):
    tensors = dict(model.state_dict())
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if st:
                n = names[id(p)]
                tensors[f"opt.exp_avg.{n}"] = st["exp_avg"]
                tensors[f"opt.exp_avg_sq.{n}"] = st["exp_avg_sq"]
                tensors[f"opt.step.{n}"] = torch.as_tensor(st["step"]).reshape(1)
    if best_state is not None:
        tensors.update({f"best.{k}": v for k, v in best_state.items()})
    meta = {"step": step, "best_step": best_step, "best_ff1": best_ff1}
    save_tensors(path, tensors, model.config.to_dict(), meta)


def _restore(path, model, opt):
    tensors, _, meta = load_tensors(path)
    model.load_state_dict({k: tensors[k] for k in model.state_dict()})
    for group in opt.param_groups:
        for p in group["params"]:
            n = next(k for k, q in model.named_parameters() if q is p)
            if f"opt.exp_avg.{n}" in tensors:
                opt.state[p] = {
                    "step": tensors[f"opt.step.{n}"].reshape(()).clone(),
                    "exp_avg": tensors[f"opt.exp_avg.{n}"].clone(),
                    "exp_avg_sq": tensors[f"opt.exp_avg_sq.{n}"].clone(),
                }
    best_state = None
    if any(k.startswith("best.") for k in tensors):
        best_state = {k[5:]: v.clone() for k, v in tensors.items() if k.startswith("best.")}
    return meta["step"], meta["best_step"], meta["best_ff1"], best_state


def train(
    dataset: Sequence[ModelInput],
    model: SpanModel,
    cfg: TrainConfig,
    dev: Sequence[SqaExample] | None = None,
    log_path=None,
    checkpoint_path=None,
    resume_from=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Fine-tune ``model`` on prepared inputs; return best-on-dev (FF1) parameters.

    Without ``dev`` the final parameters are returned.
    """
    data = [x for x in dataset if x.target is not None and not x.dropped]
    if not data:
        raise ValueError("no trainable examples (empty dataset or all dropped)")
    pad = model.config.pad

    def batch_loss(idx):
        b = collate([data[i] for i in idx], pad)
        start, end = model(b.tokens, b.valid, b.global_mask)
        return span_loss(start, end, b.target, b.passage_mask, reduction="mean")

    def dev_ff1(step):
        res = evaluate_model(model, dev, cfg.max_answer_len)
        log.info("step %d dev ff1=%.4f aos=%.4f", step, res.ff1, res.aos)
        return res.ff1

    on_eval = dev_ff1 if dev else None

    return _optimize(model, len(data), batch_loss, cfg, on_eval, log_path, checkpoint_path, resume_from, stop_after)


def mask_units(tokens: torch.Tensor, maskable: torch.Tensor, mask_id: int, prob: float, gen: torch.Generator):
    """Replace a random ``prob`` fraction of maskable positions (at least one per row) by ``mask_id``."""
    pick = (torch.rand(tokens.shape, generator=gen) < prob) & maskable
    # guarantee one masked position per row
    scores = torch.rand(tokens.shape, generator=gen).masked_fill(~maskable, -1.0)
    pick[torch.arange(tokens.shape[0]), scores.argmax(1)] = True
    pick &= maskable
    return tokens.masked_fill(pick, mask_id), pick


def pretrain_masked_units(
    model: SpanModel,
    dataset: Sequence[ModelInput],
    cfg: TrainConfig,
    mask_prob: float = 0.15,
    log_path=None,
) -> TrainResult:
    """Masked-unit prediction over question and passage units (donor pretraining)."""
    data = list(dataset)
    if not data:
        raise ValueError("empty pretraining corpus")
    mc = model.config

    def batch_loss(idx):
        b = collate([data[i] for i in idx], mc.pad)
        maskable = b.valid & (b.tokens < mc.n_units)
        gen = torch.Generator().manual_seed(torch.initial_seed())
        masked, pick = mask_units(b.tokens, maskable, mc.mask, mask_prob, gen)
        logits = model.mlm_logits(masked, b.valid, b.global_mask)
        return torch.nn.functional.cross_entropy(logits[pick], b.tokens[pick])

    return _optimize(model, len(data), batch_loss, cfg, log_path=log_path)


# -- gradient checking ------------------------------------------------------


def _sample_coords(model: SpanModel, n_coords: int, seed: int, names=None):
    """At least ``n_coords`` distinct coordinates, spread over every selected tensor."""
    rng = np.random.default_rng(seed)
    params = [(n, p) for n, p in model.named_parameters() if names is None or n in names]
    sizes = np.array([p.numel() for _, p in params])
    quota = np.minimum(sizes, -(-n_coords // len(params)))
    while quota.sum() < min(n_coords, sizes.sum()):
        room = np.flatnonzero(quota < sizes)
        quota[room] += 1
    coords = []
    for (n, p), k in zip(params, quota):
        for flat in np.sort(rng.choice(p.numel(), size=int(k), replace=False)):
            coords.append((n, int(flat)))
    return coords


def grad_check(
    model: SpanModel,
    example: ModelInput,
    epsilon: float = 1e-4,
    n_coords: int = 1000,
    seed: int = 0,
    names: Sequence[str] | None = None,
    return_details: bool = False,
):
    """Max relative error between autograd and central-difference gradients.

    Runs on a float64 copy in eval mode. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is 1e-6 times the
    largest sampled gradient magnitude, so coordinates whose gradient is
    numerically zero do not divide by rounding noise.
    """
    m = copy.deepcopy(model).double().eval()
    grads = backward(m, example)
    params = dict(m.named_parameters())
    batch = collate([example], m.config.pad)
    tgt = torch.tensor([example.target])

    @torch.no_grad()
    def loss_value():
        s, e = m(batch.tokens, batch.valid, batch.global_mask)
        return float(span_loss(s, e, tgt, batch.passage_mask))

    coords = _sample_coords(m, n_coords, seed, set(names) if names else None)
    analytic, numeric = [], []
    with torch.no_grad():
        for n, flat in coords:
            p = params[n].view(-1)
            orig = p[flat].item()
            p[flat] = orig + epsilon
            up = loss_value()
            p[flat] = orig - epsilon
            down = loss_value()
            p[flat] = orig
            numeric.append((up - down) / (2 * epsilon))
            analytic.append(grads[n].view(-1)[flat].item())
    a, nm = np.array(analytic), np.array(numeric)
    floor = 1e-6 * max(np.abs(a).max(), np.abs(nm).max(), 1e-300)
    rel = np.abs(a - nm) / np.maximum(np.maximum(np.abs(a), np.abs(nm)), floor)
    if return_details:
        return float(rel.max()), {"coords": coords, "analytic": a, "numeric": nm, "rel": rel}
    return float(rel.max())
