"""Training loop: staged fine-tuning, plateau schedule, CSV logging,
checkpointing, and mIoU evaluation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset
from .heads import (combined_loss, labels_from_mask, label_loss, label_loss_backward,
                    seg_loss, seg_loss_backward, softmax_pixelwise)
from .metrics import ConfusionMatrix, mean_iou
from .model import SegModel, predict_mask, save_checkpoint
from .optim import SGD, FinetunePlan, PlateauSchedule, Stage


@dataclass
class FitResult:
    first_loss: float
    final_loss: float
    best_val_miou: float
    final_val_miou: float
    best_ckpt: str
    final_ckpt: str
    log_path: str
    lr_final: float


def presence_batch(masks: np.ndarray, num_classes: int) -> np.ndarray:
    return np.stack([labels_from_mask(m, num_classes) for m in masks])


def batch_losses(model: SegModel, x: np.ndarray, masks: np.ndarray,
                 lambda_label: float):
    """Forward + losses + gradients w.r.t. model outputs for one minibatch."""
    state = model.forward(x)
    probs = softmax_pixelwise(state.up_logits)
    ls = seg_loss(probs, masks)
    grad_up = seg_loss_backward(probs, masks)
    lc = 0.0
    grad_scores = None
    if state.label_scores is not None:
        presence = presence_batch(masks, model.num_classes)
        n = x.shape[0]
        per = [label_loss(state.label_scores[i], presence[i]) for i in range(n)]
        lc = float(np.mean(per))
        grad_scores = np.stack([
            label_loss_backward(state.label_scores[i], presence[i]) for i in range(n)
        ]) * (lambda_label / n)
    report = combined_loss(ls, lc, lambda_label)
    return state, report, grad_up, grad_scores


def evaluate_model(model: SegModel, ds: Dataset, max_images: int = 0,
                   batch: int = 8, workers: int = 1) -> tuple[float, ConfusionMatrix]:
    """mIoU of the model over (a prefix of) a dataset split."""
    count = len(ds) if max_images <= 0 else min(max_images, len(ds))
    chunks = [np.arange(lo, min(lo + batch, count)) for lo in range(0, count, batch)]

    def run_chunks(m: SegModel, idx_list) -> ConfusionMatrix:
        cm = ConfusionMatrix(model.num_classes + 1)
        for idx in idx_list:
            x, masks = ds.batch(idx)
            cm.accumulate(predict_mask(m.predict_probs(x)), masks)
        return cm

    # one BLAS thread per worker: faster at these GEMM shapes on small CPUs
    # and keeps reductions deterministic regardless of ambient thread config
    total = ConfusionMatrix(model.num_classes + 1)
    with threadpool_limits(limits=1):
        if workers > 1:
            replicas = [model] + [model.clone_sharing_params() for _ in range(workers - 1)]
            shares = [chunks[i::workers] for i in range(workers)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_chunks, m, share)
                           for m, share in zip(replicas, shares)]
                for fut in futures:  # fixed merge order
                    total.merge(fut.result())
        else:
            total.merge(run_chunks(model, chunks))
    return mean_iou(total), total


class _EpochSampler:
    """Deterministic shuffled minibatch indices that wrap across epochs."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        out = []
        while len(out) < self.batch:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch - len(out), self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + take])
            self.pos += take
        return np.concatenate(out)


def fit(model: SegModel, train_ds: Dataset, val_ds: Dataset, *, out_dir: str,
        lr: float, momentum: float = 0.9, weight_decay: float = 5e-4,
        batch: int = 8, lambda_label: float = 1.0, iters: int = 300,
        stage1_iters: int = 30, stage1_lr_scale: float = 0.1,
        eval_every: int = 100, eval_subset: int = 100, patience: int = 3,
        lr_factor: float = 0.1, seed: int = 0, workers: int = 1,
        config_text: str = "", quiet: bool = False) -> FitResult:
    os.makedirs(out_dir, exist_ok=True)
    groups = FinetunePlan.group_params(model.params())
    new_groups = [g for g in groups if g != "encoder"]
    stage1 = min(stage1_iters, iters)
    plan = FinetunePlan(
        stages=[Stage("pretrain", new_groups, stage1_lr_scale, stage1),
                Stage("full", sorted(groups), 1.0, iters - stage1)],
        groups=groups)

    sgd = SGD(lr, momentum, weight_decay)
    sched = PlateauSchedule(patience=patience, factor=lr_factor)
    sampler = _EpochSampler(len(train_ds), batch, np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, 0xBA7C]))))

    log_path = os.path.join(out_dir, "train_log.csv")
    best_ckpt = os.path.join(out_dir, "checkpoint_best")
    final_ckpt = os.path.join(out_dir, "checkpoint_final")
    best_miou = -1.0
    first_loss = None
    report = None

    with open(log_path, "w") as log, threadpool_limits(limits=1):
        log.write("iter,seg_loss,label_loss,combined,lr\n")
        for it in range(plan.total_iters):
            stage = plan.stage_at(it)
            x, masks = train_ds.batch(sampler.next_batch())
            model.zero_grad()
            _, report, grad_up, grad_scores = batch_losses(model, x, masks, lambda_label)
            if not np.isfinite(report.combined):
                raise FloatingPointError(
                    f"non-finite loss at iteration {it}: seg={report.seg_loss} "
                    f"label={report.label_loss}")
            model.backward(grad_up, grad_scores)
            sgd.step(plan.active_params(stage), stage.lr_scale)
            if first_loss is None:
                first_loss = report.combined
            log.write(f"{it},{report.seg_loss!r},{report.label_loss!r},"
                      f"{report.combined!r},{sgd.lr * stage.lr_scale!r}\n")

            if eval_every > 0 and (it + 1) % eval_every == 0:
                miou, _ = evaluate_model(model, val_ds, max_images=eval_subset,
                                         batch=batch, workers=workers)
                sched.update(miou, sgd)
                if miou > best_miou:
                    best_miou = miou
                    save_checkpoint(best_ckpt, model, config_text)
                if not quiet:
                    print(f"  iter {it + 1}: loss {report.combined:.4f} "
                          f"val mIoU {miou:.4f} lr {sgd.lr:g}")

    final_miou, _ = evaluate_model(model, val_ds, batch=batch, workers=workers)
    save_checkpoint(final_ckpt, model, config_text)
    if final_miou > best_miou:
        best_miou = final_miou
        save_checkpoint(best_ckpt, model, config_text)
    if not os.path.exists(os.path.join(best_ckpt, "params.bin")):
        save_checkpoint(best_ckpt, model, config_text)
    return FitResult(first_loss if first_loss is not None else float("nan"),
                     report.combined if report else float("nan"),
                     best_miou, final_miou, best_ckpt, final_ckpt, log_path, sgd.lr)
