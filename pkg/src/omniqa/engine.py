"""Training and evaluation loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import ImageCache, ManifestRow
from .errors import FitError, NumericalError
from .losses import make_loss
from .model import QualityModel
from .sampling import PatchSampler, image_rng
from .stats import logistic5, logistic_fit, plcc, rmse, srcc

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    srcc: float
    seconds: float = 0.0


def batches(order: Sequence[int], size: int, min_size: int = 1) -> List[List[int]]:
    """Consecutive chunks; a trailing chunk smaller than ``min_size`` joins the previous one."""
    chunks = [list(order[i:i + size]) for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks[-2].extend(chunks.pop())
    return chunks


def patch_tensor(rows: Sequence[ManifestRow], cache: ImageCache, sampler: PatchSampler,
                 seed: int, epoch: int) -> torch.Tensor:
    sets = [sampler.sample(cache.get(r), image_rng(seed, r.image_id, epoch)) for r in rows]
    return torch.stack([s.to_tensor() for s in sets])


def _diagnostics(model: QualityModel, epoch: int, batch: int) -> str:
    norms = {n: float(p.detach().norm()) for n, p in model.named_parameters() if p.requires_grad}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
    bad = [n for n, v in norms.items() if not math.isfinite(v)]
    return f"epoch {epoch}, batch {batch}; non-finite params: {bad[:5]}; largest norms: {worst}"


def train_run(rows: Sequence[ManifestRow], cfg: RunConfig, cache: Optional[ImageCache] = None,
              on_epoch: Optional[Callable[[EpochRecord], None]] = None):
    """Fit a fresh model on ``rows``; returns (model, checkpoint, history)."""
    if not rows:
        raise ValueError("empty training set")
    tc = cfg.train
    torch.set_num_threads(tc.threads)
    torch.manual_seed(tc.seed)
    cache = cache or ImageCache()
    sampler = PatchSampler(cfg.sampler, cfg.prior)
    model = QualityModel(cfg.model)
    model.train()
    opt = torch.optim.Adam(model.trainable_parameters(), lr=tc.lr)
    loss_fn = make_loss(cfg.loss)
    min_batch = 2 if cfg.loss.kind == "norm_in_norm" else 1
    mos_all = torch.tensor([r.mos for r in rows], dtype=torch.float32)

    history: List[EpochRecord] = []
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(rows))
        preds = np.zeros(len(rows))
        losses, weights = [], []
        for b_idx, idx in enumerate(batches(order, tc.batch_size, min_batch)):
            x = patch_tensor([rows[i] for i in idx], cache, sampler, cfg.sampler.seed, epoch)
            pred = model(x)
            loss = loss_fn(mos_all[idx], pred)
            if not torch.isfinite(loss):
                raise NumericalError("non-finite loss: " + _diagnostics(model, epoch, b_idx))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            preds[idx] = pred.detach().numpy()
            losses.append(float(loss.detach()))
            weights.append(len(idx))
        try:
            ep_srcc = srcc(preds, mos_all.numpy())
        except NumericalError:
            ep_srcc = float("nan")
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), ep_srcc,
                          time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.5f srcc %.4f (%.1fs)", rec.epoch, rec.loss, rec.srcc, rec.seconds)
        if on_epoch:
            on_epoch(rec)
    model.eval()
    ckpt = Checkpoint.from_model(model, cfg, tc.epochs)
    return model, ckpt, history


def write_history(path, history: Sequence[EpochRecord]) -> None:
    """CSV (epoch, loss, srcc); wall-clock time is left out so reruns compare byte-equal."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "srcc"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.srcc)])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    image_ids: List[str]
    mos: np.ndarray
    raw: np.ndarray
    mapped: np.ndarray
    rho: np.ndarray
    plcc: float
    srcc: float
    rmse: float
    config_hash: str
    checkpoint_id: str
    errors: Dict[str, str] = field(default_factory=dict)
    fit_converged: bool = True

    def summary(self) -> Dict:
        return {
            "n_images": len(self.image_ids),
            "plcc": self.plcc,
            "srcc": self.srcc,
            "rmse": self.rmse,
            "rho": [float(v) for v in self.rho],
            "fit_converged": self.fit_converged,
            "config_hash": self.config_hash,
            "checkpoint_id": self.checkpoint_id,
            "errors": self.errors,
        }

    def write(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "mos", "raw_score", "mapped_score"])
            for i, iid in enumerate(self.image_ids):
                w.writerow([iid, repr(float(self.mos[i])), repr(float(self.raw[i])), repr(float(self.mapped[i]))])
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


def predict(model: QualityModel, rows: Sequence[ManifestRow], cfg: RunConfig, cache: ImageCache,
            batch_size: Optional[int] = None):
    """Raw scores with the fixed evaluation seed; failures are collected per image."""
    torch.set_num_threads(cfg.train.threads)
    sampler = PatchSampler(cfg.sampler, cfg.prior)
    batch_size = batch_size or cfg.train.batch_size
    ids, scores, errors = [], [], {}
    ok_rows = []
    for r in rows:
        try:
            cache.get(r)
            ok_rows.append(r)
        except (OSError, ValueError) as exc:
            errors[r.image_id] = f"{type(exc).__name__}: {exc}"
    model.eval()
    with torch.no_grad():
        for chunk in batches(list(range(len(ok_rows))), batch_size):
            sub = [ok_rows[i] for i in chunk]
            x = patch_tensor(sub, cache, sampler, cfg.train.eval_seed, 0)
            scores.extend(model(x).numpy().tolist())
            ids.extend(r.image_id for r in sub)
    return ids, np.asarray(scores, dtype=np.float64), [r.mos for r in ok_rows], errors


def evaluate_run(checkpoint: Checkpoint, rows: Sequence[ManifestRow], cache: Optional[ImageCache] = None,
                 model: Optional[QualityModel] = None) -> EvalReport:
    cfg = checkpoint.config
    model = model or checkpoint.build_model()
    cache = cache or ImageCache()
    ids, raw, mos, errors = predict(model, rows, cfg, cache)
    mos = np.asarray(mos, dtype=np.float64)
    converged = True
    try:
        rho = logistic_fit(raw, mos)
    except FitError as exc:
        converged = False
        rho = exc.params if exc.params is not None else np.array([0.0, 0.0, 0.0, 0.0, float(mos.mean())])
        errors["__fit__"] = str(exc)
    mapped = logistic5(raw, rho)
    return EvalReport(ids, mos, raw, mapped, np.asarray(rho), plcc(mapped, mos), srcc(raw, mos),
                      rmse(mapped, mos), cfg.digest(), checkpoint.checkpoint_id, errors, converged)
