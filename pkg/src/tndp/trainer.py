"""Episode rollouts, decision-utility-gain rewards, REINFORCE and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from tndp.core import DecisionSpace, optimal_decision
from tndp.model import (
    FORMAT_VERSION,
    Batch,
    CheckpointError,
    ModelConfig,
    TNDP,
    atomic_torch_save,
    collate,
    model_from_blob,
    policy_distribution,
    read_checkpoint_file,
)
from tndp.tasks.base import Episode

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_p", "loss_q", "mean_terminal_utility", "lr", "wall_time_s")
MODES = ("sample", "greedy", "random")


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, checkpoint: Optional[str] = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    horizon: int
    epochs: int = 100_000
    batch_size: int = 16
    lr: float = 5e-4
    alpha: float = 0.99
    seed: int = 0
    checkpoint_every: int = 1000
    loss_q_weight: float = 1.0
    reinforce_baseline: bool = False
    grad_clip: float = 0.0
    grad_steps: int = 0
    group_size: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.group_size < 1 or self.batch_size % self.group_size:
            raise ValueError("group_size must be >= 1 and divide batch_size")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def discounted_returns(rewards, alpha: float) -> np.ndarray:
    """R_t = r_t + alpha R_{t+1}, R_T = r_T, along the last axis."""
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        acc = r[..., t] + alpha * acc
        out[..., t] = acc
    return out


def gaussian_nll(mean, std, y):
    """Elementwise -log N(y | mean, std^2) for tensors or arrays."""
    if isinstance(mean, torch.Tensor):
        return 0.5 * math.log(2 * math.pi) + torch.log(std) + 0.5 * ((y - mean) / std) ** 2
    mean, std, y = (np.asarray(a, dtype=float) for a in (mean, std, y))
    return 0.5 * np.log(2 * np.pi) + np.log(std) + 0.5 * ((y - mean) / std) ** 2


def prediction_loss(means, stds, targets):
    """Summed Gaussian negative log-likelihood over all steps and prediction designs."""
    nll = gaussian_nll(means, stds, targets)
    return nll.sum() if isinstance(nll, torch.Tensor) else float(nll.sum())


def query_loss(log_probs, returns):
    """-sum_t R_t log pi_t, with the returns treated as constants."""
    if isinstance(log_probs, torch.Tensor):
        r = torch.as_tensor(np.asarray(returns), dtype=log_probs.dtype).detach()
        return -(r * log_probs).sum()
    return float(-(np.asarray(returns) * np.asarray(log_probs)).sum())


def step_reward(preds_before, preds_after, space: DecisionSpace, *, draws: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None, n_samples: int = 256) -> float:
    """Gain in maximum expected utility from ``preds_before`` to ``preds_after``.

    Both terms are evaluated on the same standard-normal draws.
    """
    if draws is None and space.kind == "discrete-arm":
        if rng is None:
            raise ValueError("discrete-arm rewards need rng or draws")
        draws = rng.standard_normal((n_samples, space.n_decisions))
    after = optimal_decision(preds_after, space, draws=draws)[1]
    before = optimal_decision(preds_before, space, draws=draws)[1]
    return after - before


@dataclass
class StepRecord:
    batch: Batch
    targets: np.ndarray
    chosen: Optional[np.ndarray]
    chosen_x: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    """A batch of rollouts: per-step records, decision values, rewards and true utilities."""

    records: list[StepRecord]
    values: np.ndarray
    utilities: np.ndarray
    nll: Optional[torch.Tensor] = None
    log_probs: Optional[torch.Tensor] = None
    acquisition_times: list[float] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    @property
    def horizon(self) -> int:
        return self.values.shape[1] - 1


def _stack_designs(x_list, tag_list):
    x = np.stack(x_list)
    tags = None if tag_list[0] is None else np.stack(tag_list)
    return x, tags


def rollout(model: TNDP, envs: Sequence[Episode], rng: np.random.Generator, mode: str = "sample",
            grad: bool = False, horizon: Optional[int] = None) -> Trajectory:
    """Run B episodes in lockstep for ``horizon`` queries.

    ``mode`` selects designs by sampling the policy, by its argmax
    (deployment), or uniformly at random (prediction head only). With
    ``grad=True`` the per-step NLL and chosen log-probabilities keep their
    autograd graph for the training losses.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    T = horizon if horizon is not None else envs[0].horizon
    B = len(envs)
    dtype = next(model.parameters()).dtype
    ctx = [env.initial_context() for env in envs]
    cx = [c.x for c in ctx]
    ct = [c.tags for c in ctx]
    cy = [c.y for c in ctx]
    queried_list = [list(c.ids) for c in ctx]
    queried_set = [set(q) for q in queried_list]
    values = np.zeros((B, T + 1))
    utils = np.zeros((B, T + 1))
    records: list[StepRecord] = []
    nlls, logps, times = [], [], []
    ctx_mgr = torch.enable_grad() if grad else torch.no_grad()
    with ctx_mgr:
        for t in range(T + 1):
            t0 = time.perf_counter()
            psets = [env.prediction_set(t, queried_list[b], rng) for b, env in enumerate(envs)]
            if t < T:
                cands = [env.query_candidates(t, queried_set[b], rng) for b, env in enumerate(envs)]
                if any(len(c) == 0 for c in cands):
                    raise RuntimeError(f"query set exhausted at step {t + 1} of {T}")
                if len({len(c) for c in cands}) > 1:
                    raise RuntimeError("episodes in a batch must share query-set sizes")
            else:
                cands = None
            items = []
            for b, env in enumerate(envs):
                item = dict(xc=cx[b], tc=ct[b], yc=cy[b], xp=psets[b].x, tp=psets[b].tags,
                            xq=cands[b].x if cands else np.zeros((0, env.d_x)),
                            tq=(cands[b].tags if cands else (np.zeros(0, int) if env.n_decisions else None)),
                            step=t, gamma=env.gamma)
                items.append(item)
            batch = collate(items, dtype=dtype)
            out = model(batch)
            mean = out.mean.detach().cpu().double().numpy()
            std = out.std.detach().cpu().double().numpy()
            targets = np.stack([p.y for p in psets])
            if grad:
                nlls.append(gaussian_nll(out.mean, out.std, torch.as_tensor(targets, dtype=dtype)).sum(-1))
            chosen = None
            chosen_x = None
            if cands is not None:
                n_q = len(cands[0])
                if mode == "random":
                    chosen = rng.integers(0, n_q, size=B)
                else:
                    probs = policy_distribution(out.logits.detach().cpu().double().numpy())
                    if mode == "greedy":
                        chosen = probs.argmax(axis=1)
                    else:
                        chosen = np.array([rng.choice(n_q, p=p) for p in probs])
                if grad:
                    lp = F.log_softmax(out.logits, dim=-1)
                    logps.append(lp.gather(1, torch.as_tensor(chosen).long().unsqueeze(1)).squeeze(1))
                times.append(time.perf_counter() - t0)
                chosen_x = np.stack([cands[b].x[chosen[b]] for b in range(B)])
            for b, env in enumerate(envs):
                values[b, t] = env.decision_value(mean[b], std[b], psets[b])
                utils[b, t] = env.true_utility(mean[b], std[b], psets[b])
            records.append(StepRecord(batch, targets, chosen, chosen_x))
            if cands is not None:
                for b in range(B):
                    c, j = cands[b], chosen[b]
                    cx[b] = np.concatenate([cx[b], c.x[j:j + 1]])
                    if ct[b] is not None:
                        ct[b] = np.concatenate([ct[b], c.tags[j:j + 1]])
                    cy[b] = np.concatenate([cy[b], c.y[j:j + 1]])
                    queried_list[b].append(int(c.ids[j]))
                    queried_set[b].add(int(c.ids[j]))
    traj = Trajectory(records, values, utils, acquisition_times=times)
    if grad:
        traj.nll = torch.stack(nlls, dim=1)
        traj.log_probs = torch.stack(logps, dim=1) if logps else None
    return traj


def rollout_episode(model: TNDP, env: Episode, rng: np.random.Generator, mode: str = "sample",
                    horizon: Optional[int] = None) -> Trajectory:
    return rollout(model, [env], rng, mode=mode, horizon=horizon)


def advantages(returns, baseline: bool = False, group_size: int = 1) -> np.ndarray:
    """Returns minus a baseline, per step.

    With ``group_size > 1`` consecutive rows are rollouts of the same
    environment and each row's baseline is the mean of the other rows in its
    group (leave-one-out, so the estimator stays unbiased). Otherwise the
    baseline is the batch mean.
    """
    r = np.asarray(returns, dtype=float)
    if not baseline:
        return r
    if group_size > 1:
        g = r.reshape(-1, group_size, r.shape[-1])
        others = (g.sum(axis=1, keepdims=True) - g) / (group_size - 1)
        return (g - others).reshape(r.shape)
    return r - r.mean(axis=0, keepdims=True)


def trajectory_losses(traj: Trajectory, returns: np.ndarray, baseline: bool = False, group_size: int = 1):
    """Batch-mean L^(p) and L^(q) from a rollout collected with ``grad=True``."""
    loss_p = traj.nll.sum(dim=1).mean()
    if traj.log_probs is None:
        return loss_p, torch.zeros((), dtype=loss_p.dtype)
    r = advantages(returns, baseline, group_size)
    loss_q = torch.stack([query_loss(traj.log_probs[b], r[b]) for b in range(r.shape[0])]).mean()
    return loss_p, loss_q


def replay_losses(model: TNDP, traj: Trajectory, returns: np.ndarray, baseline: bool = False,
                  group_size: int = 1):
    """Recompute both losses for a recorded trajectory with the current weights.

    The chosen designs, targets and returns stay fixed, which makes the loss a
    deterministic function of the parameters (used for gradient checks).
    """
    dtype = next(model.parameters()).dtype
    nlls, logps = [], []
    for rec in traj.records:
        out = model(rec.batch.to(dtype))
        nlls.append(gaussian_nll(out.mean, out.std, torch.as_tensor(rec.targets, dtype=dtype)).sum(-1))
        if rec.chosen is not None:
            lp = F.log_softmax(out.logits, dim=-1)
            logps.append(lp.gather(1, torch.as_tensor(rec.chosen).long().unsqueeze(1)).squeeze(1))
    replay = Trajectory(traj.records, traj.values, traj.utilities, torch.stack(nlls, 1),
                        torch.stack(logps, 1) if logps else None)
    return trajectory_losses(replay, returns, baseline, group_size)


def subsampled_losses(model: TNDP, traj: Trajectory, returns: np.ndarray, steps: Sequence[int],
                      baseline: bool = False, group_size: int = 1):
    """Unbiased estimate of :func:`replay_losses` from a subset of steps.

    Each listed step is replayed with gradients and weighted by
    ``(T + 1) / len(steps)``, so for uniformly drawn step subsets the
    expectation equals the full-trajectory losses.
    """
    dtype = next(model.parameters()).dtype
    T = traj.horizon
    w = (T + 1) / len(steps)
    r = advantages(returns, baseline, group_size)
    loss_p = torch.zeros((), dtype=dtype)
    loss_q = torch.zeros((), dtype=dtype)
    for t in steps:
        rec = traj.records[t]
        out = model(rec.batch.to(dtype))
        nll = gaussian_nll(out.mean, out.std, torch.as_tensor(rec.targets, dtype=dtype)).sum(-1)
        loss_p = loss_p + w * nll.mean()
        if rec.chosen is not None:
            lp = F.log_softmax(out.logits, dim=-1)
            lp = lp.gather(1, torch.as_tensor(rec.chosen).long().unsqueeze(1)).squeeze(1)
            loss_q = loss_q - w * (torch.as_tensor(r[:, t], dtype=dtype) * lp).mean()
    return loss_p, loss_q


def _write_log_row(path: str, row: dict) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)


def _truncate_log(path: str, next_epoch: int) -> None:
    if not os.path.exists(path):
        return
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < next_epoch]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def save_checkpoint(path: str, model: TNDP, optimizer, scheduler, next_epoch: int,
                    train_config: TrainConfig, extra: Optional[dict] = None) -> None:
    atomic_torch_save({
        "format": "tndp-checkpoint",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "signature": model.config.signature(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "next_epoch": next_epoch,
        "train_config": asdict(train_config),
        "rng": {"seed": train_config.seed, "next_epoch": next_epoch, "torch": torch.get_rng_state()},
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> dict:
    """Read a training checkpoint; returns the raw dict plus a rebuilt ``model``."""
    blob = read_checkpoint_file(path, "tndp-checkpoint")
    blob["model"] = model_from_blob(blob, path, expected)
    return blob


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(train_config: TrainConfig, model_config: ModelConfig,
          env_factory: Callable[[np.random.Generator], Episode], out_dir: str, *,
          resume: bool = False, max_epochs: Optional[int] = None,
          progress: Optional[Callable[[dict], None]] = None) -> str:
    """Train a TNDP on freshly simulated episodes; returns the checkpoint path.

    One epoch is one batch of ``batch_size`` new environments. Every epoch's
    randomness derives from ``(seed, epoch)``, so resuming from a checkpoint
    continues exactly as an uninterrupted run would. ``max_epochs`` stops
    early (the schedule still spans ``train_config.epochs``).
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    log_path = os.path.join(out_dir, "train_log.csv")
    tc = train_config
    torch.manual_seed(tc.seed)
    model = TNDP(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=tc.epochs, eta_min=0.0)
    start = 0
    if resume:
        if not os.path.exists(ckpt_path):
            raise FileNotFoundError(f"no checkpoint to resume at {ckpt_path}")
        blob = load_checkpoint(ckpt_path, expected=model_config)
        model.load_state_dict(blob["state_dict"])
        optimizer.load_state_dict(blob["optimizer"])
        scheduler.load_state_dict(blob["scheduler"])
        torch.set_rng_state(blob["rng"]["torch"])
        start = int(blob["next_epoch"])
        _truncate_log(log_path, start)
    elif os.path.exists(log_path):
        os.remove(log_path)
    stop = tc.epochs if max_epochs is None else min(tc.epochs, start + max_epochs)
    t_start = time.perf_counter()
    model.train()
    for epoch in range(start, stop):
        rng = _epoch_rng(tc.seed, epoch)
        # group_size consecutive rollouts share one environment
        envs = [env for env in [env_factory(rng) for _ in range(tc.batch_size // tc.group_size)]
                for _ in range(tc.group_size)]
        if 0 < tc.grad_steps < tc.horizon + 1:
            traj = rollout(model, envs, rng, mode="sample", grad=False, horizon=tc.horizon)
            returns = discounted_returns(traj.rewards, tc.alpha)
            steps = np.sort(rng.choice(tc.horizon + 1, tc.grad_steps, replace=False))
            loss_p, loss_q = subsampled_losses(model, traj, returns, steps, tc.reinforce_baseline,
                                               tc.group_size)
        else:
            traj = rollout(model, envs, rng, mode="sample", grad=True, horizon=tc.horizon)
            returns = discounted_returns(traj.rewards, tc.alpha)
            loss_p, loss_q = trajectory_losses(traj, returns, tc.reinforce_baseline, tc.group_size)
        loss = loss_p + tc.loss_q_weight * loss_q
        lr = optimizer.param_groups[0]["lr"]
        if not torch.isfinite(loss):
            diag = os.path.join(out_dir, "diverged.pt")
            save_checkpoint(diag, model, optimizer, scheduler, epoch, tc, {"loss_p": loss_p.item(),
                                                                            "loss_q": loss_q.item()})
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", diag)
        optimizer.zero_grad()
        loss.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        optimizer.step()
        scheduler.step()
        row = dict(epoch=epoch, loss_p=repr(loss_p.item()), loss_q=repr(loss_q.item()),
                   mean_terminal_utility=repr(float(traj.utilities[:, -1].mean())), lr=repr(lr),
                   wall_time_s=f"{time.perf_counter() - t_start:.3f}")
        _write_log_row(log_path, row)
        if progress is not None:
            progress(row)
        if (epoch + 1) % tc.checkpoint_every == 0 or epoch + 1 == stop:
            save_checkpoint(ckpt_path, model, optimizer, scheduler, epoch + 1, tc)
    if start >= stop and not os.path.exists(ckpt_path):
        save_checkpoint(ckpt_path, model, optimizer, scheduler, start, tc)
    return ckpt_path
