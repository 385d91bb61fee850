"""Federated orchestration: local training, FedAvg, round scheduling.

Arms:
  fedavg           plain cross-entropy on local data
  crl_ca_ce        + cross-entropy on counterfactual composites
  crl_ca_ce_align  + feature alignment between each image and its composite
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import crl, evaluation
from .dataset import ClientShard, LabeledBatch, as_batch
from .tensor_nn import PARAM_ORDER, Architecture, ModelParams, backward, init_params, sgd_step

log = logging.getLogger(__name__)

ARMS = ("fedavg", "crl_ca_ce", "crl_ca_ce_align")
CSV_HEADER = ("round", "arm", "seed", "train_loss", "ce", "ca", "align", "id_acc", "ood_acc", "bg_conf", "secs")

# stream tags for per-client RNGs
_SHUFFLE, _DONOR, _SELECT = 1, 2, 3


class ClientError(RuntimeError):
    def __init__(self, client_id: int, round_index: int, cause: BaseException):
        self.client_id = client_id
        self.round_index = round_index
        super().__init__(f"client {client_id} failed in round {round_index}: {cause}")


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class FederatedConfig:
    num_clients: int = 5
    rounds: int = 20
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.005
    weight_decay: float = 0.01
    sample_fraction: float = 1.0
    alpha: float = 0.9
    lambda_weighted: float = 0.1
    align_weight: float = 0.1
    arm: str = "fedavg"
    seed: int = 0
    resample_per_epoch: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        for name in ("num_clients", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.lr < 0 or self.weight_decay < 0 or self.align_weight < 0:
            raise ValueError("lr, weight_decay and align_weight must be >= 0")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def augment(self) -> bool:
        return self.arm != "fedavg"

    @property
    def effective_align_weight(self) -> float:
        return self.align_weight if self.arm == "crl_ca_ce_align" else 0.0


@dataclass
class RoundReport:
    round_index: int
    arm: str
    seed: int
    mean_train_loss: float
    mean_ce: float
    mean_ca: float
    mean_align: float
    id_acc: float
    ood_acc: float
    bg_conf: float
    bg_match: float
    secs: float
    num_updates: int = 0

    def csv_row(self, wall_clock: bool = False) -> List[str]:
        return [
            str(self.round_index), self.arm, str(self.seed),
            *(f"{v:.6f}" for v in (self.mean_train_loss, self.mean_ce, self.mean_ca, self.mean_align,
                                    self.id_acc, self.ood_acc, self.bg_conf)),
            f"{self.secs:.3f}" if wall_clock else "",
        ]


@dataclass
class EvalSets:
    id_set: LabeledBatch
    ood_set: LabeledBatch
    probe: Optional[LabeledBatch] = None
    num_backgrounds: Optional[int] = None

    @classmethod
    def build(cls, id_samples, ood_samples, backend: crl.SaliencyBackend = crl.SaliencyBackend(),
              num_backgrounds: Optional[int] = None) -> "EvalSets":
        return cls(as_batch(id_samples), as_batch(ood_samples),
                   evaluation.probe_inputs(ood_samples, backend), num_backgrounds)


@dataclass
class ServerState:
    global_params: ModelParams
    round_index: int = 0
    history: List[RoundReport] = field(default_factory=list)


def client_rng(seed: int, round_index: Optional[int], client_id: Optional[int], stream: int) -> np.random.Generator:
    """Independent stream per (seed, round, client, purpose); ``None`` means "any"."""
    r = 0 if round_index is None else round_index + 1
    k = 0 if client_id is None else client_id + 1
    return np.random.default_rng(np.random.SeedSequence([seed, r, k, stream]))


def thread_cap(cfg: FederatedConfig) -> int:
    env = os.environ.get("FEDCAUG_THREADS")
    if cfg.threads:
        return max(1, cfg.threads)
    if env:
        return max(1, int(env))
    return 1


def composite_batch(objects: np.ndarray, masks: np.ndarray, backgrounds: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorized compositing over (N, H, W, C) stacks; mask is (N, H, W)."""
    inside = masks.astype(bool)[..., None]
    out = np.where(inside, alpha * objects + (1.0 - alpha) * backgrounds, backgrounds)
    return np.clip(out, 0.0, 1.0)


def local_train(global_params: ModelParams, shard: ClientShard, cfg: FederatedConfig,
                round_index: int = 0) -> Tuple[ModelParams, int, Dict[str, float]]:
    """Run ``cfg.local_epochs`` of shuffled mini-batch SGD on one client.

    For augmentation arms each sample is paired with a composite of its cached
    object on a random background from the same shard's pool.
    """
    n = len(shard)
    if n == 0:
        raise ValueError(f"client {shard.client_id} has no samples")
    if cfg.augment and (not shard.background_pool or shard.objects is None):
        raise ValueError(f"client {shard.client_id}: background pool is empty; build it before augmenting")

    params = global_params.copy()
    x = np.stack([s.image for s in shard.samples])  # N, H, W, C
    y = np.array([s.label for s in shard.samples], dtype=np.int64)
    shuffle_rng = client_rng(cfg.seed, round_index, shard.client_id, _SHUFFLE)
    donor_rng = client_rng(cfg.seed, round_index if cfg.resample_per_epoch else None, shard.client_id, _DONOR)
    pool = np.stack(shard.background_pool) if cfg.augment else None
    fixed_donors = None if cfg.resample_per_epoch or not cfg.augment else donor_rng.integers(len(pool), size=n)

    totals = {"loss": 0.0, "ce": 0.0, "ca": 0.0, "align": 0.0}
    seen = 0
    step = 0
    for _ in range(cfg.local_epochs):
        order = shuffle_rng.permutation(n)
        if cfg.augment:
            donors = donor_rng.integers(len(pool), size=n) if fixed_donors is None else fixed_donors
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = x[idx].transpose(0, 3, 1, 2)
            aug = None
            if cfg.augment:
                comp = composite_batch(shard.objects[idx], shard.masks[idx], pool[donors[idx]], cfg.alpha)
                aug = comp.transpose(0, 3, 1, 2)
            loss = backward(params, batch, y[idx], aug, y[idx], cfg.effective_align_weight, step=step)
            params = sgd_step(params, loss.gradients, cfg.lr, cfg.weight_decay)
            m = len(idx)
            totals["loss"] += loss.scalar * m
            for k in ("ce", "ca", "align"):
                totals[k] += loss.parts[k] * m
            seen += m
            step += 1
    metrics = {k: v / seen for k, v in totals.items()}
    metrics["steps"] = step
    return params, n, metrics


def fedavg_aggregate(updates: Sequence[Tuple[ModelParams, int]]) -> ModelParams:
    """Sample-weighted mean of client parameters."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    arch = updates[0][0].arch
    for p, _ in updates[1:]:
        if p.arch != arch:
            raise ArchitectureMismatch(f"client architecture {p.arch} differs from {arch}")
    counts = np.array([c for _, c in updates], dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("sample counts must be positive")
    weights = counts / counts.sum()
    out = {}
    for name in PARAM_ORDER:
        acc = np.zeros_like(updates[0][0][name])
        for (p, _), w in zip(updates, weights):
            acc += w * p[name]
        out[name] = acc
    return ModelParams(arch, out)


def select_clients(cfg: FederatedConfig, round_index: int) -> List[int]:
    m = math.ceil(cfg.sample_fraction * cfg.num_clients)
    rng = client_rng(cfg.seed, round_index, None, _SELECT)
    return sorted(int(k) for k in rng.permutation(cfg.num_clients)[:m])


def evaluate(params: ModelParams, evals: EvalSets) -> Dict[str, float]:
    out = {
        "id_acc": evaluation.top1_accuracy(params, evals.id_set),
        "ood_acc": evaluation.top1_accuracy(params, evals.ood_set),
        "bg_conf": float("nan"),
        "bg_match": float("nan"),
    }
    if evals.probe is not None:
        pr = evaluation.probe_from_inputs(params, evals.probe, evals.num_backgrounds)
        out["bg_conf"] = pr.mean_confidence
        out["bg_match"] = pr.confound_match_rate
    return out


def run_federated(cfg: FederatedConfig, shards: Sequence[ClientShard], evals: Optional[EvalSets],
                  arch: Optional[Architecture] = None, init: Optional[ModelParams] = None) -> ServerState:
    if len(shards) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} shards, got {len(shards)}")
    if init is None:
        if arch is None:
            first = shards[0].samples[0].image
            arch = Architecture(in_channels=first.shape[2], height=first.shape[0], width=first.shape[1])
        init = init_params(arch, seed=cfg.seed)
    state = ServerState(init.copy())
    by_id = {s.client_id: s for s in shards}
    workers = thread_cap(cfg)

    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        chosen = select_clients(cfg, r)

        def train(k, r=r, g=state.global_params):
            try:
                return local_train(g, by_id[k], cfg, round_index=r)
            except Exception as exc:
                raise ClientError(k, r, exc) from exc

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(train, chosen))
        else:
            results = [train(k) for k in chosen]

        state.global_params = fedavg_aggregate([(p, n) for p, n, _ in results])
        if not state.global_params.is_finite():
            raise FloatingPointError(f"global parameters became non-finite in round {r}")
        total = sum(n for _, n, _ in results)
        mean = {k: sum(m[k] * n for _, n, m in results) / total for k in ("loss", "ce", "ca", "align")}
        scores = evaluate(state.global_params, evals) if evals is not None else dict.fromkeys(
            ("id_acc", "ood_acc", "bg_conf", "bg_match"), float("nan"))
        report = RoundReport(r, cfg.arm, cfg.seed, mean["loss"], mean["ce"], mean["ca"], mean["align"],
                             scores["id_acc"], scores["ood_acc"], scores["bg_conf"], scores["bg_match"],
                             time.perf_counter() - t0, len(results))
        state.history.append(report)
        state.round_index = r + 1
        log.info("arm=%s seed=%d round=%d loss=%.4f id=%.3f ood=%.3f bg_conf=%.3f", cfg.arm, cfg.seed, r,
                 report.mean_train_loss, report.id_acc, report.ood_acc, report.bg_conf)
    return state


def run_rounds(cfg: FederatedConfig, shards: Sequence[ClientShard], eval_sets: Optional[EvalSets],
               arch: Optional[Architecture] = None) -> List[RoundReport]:
    return run_federated(cfg, shards, eval_sets, arch).history


def history_csv(history: Sequence[RoundReport], wall_clock: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rep in history:
        w.writerow(rep.csv_row(wall_clock))
    return buf.getvalue()


def history_json(history: Sequence[RoundReport]) -> List[dict]:
    return [asdict(r) for r in history]


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)
