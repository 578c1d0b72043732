"""Training loop, per-epoch evaluation, and report generation.

One optimizer step per batch: every sample runs forward+backward on its own
tape (optionally on worker threads), per-sample gradients are merged in
sample order and averaged, then Adam applies the update at the scheduled
learning rate.  With --threads 1 and a fixed seed the metrics log and
checkpoints are byte-identical across runs.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, load_prefix, save_checkpoint
from .config import Config
from .data import SceneDataset
from .density import LossReport
from .errors import DivergenceError, UsageError
from .groundtruth import (DegradationSpec, degrade, make_density_map, mae_rmse,
                          patch_counts)
from .model import CrowdCounter, build_model
from .nn import rekey_dropout, seed_stream
from .optim import Adam, lr_schedule
from .tensor import Tape, Tensor


@dataclass
class EpochLog:
    epoch: int
    report: LossReport
    train_mae: float
    val_mae: float
    val_rmse: float


def _format_epoch(log: EpochLog) -> str:
    r = log.report
    return (f"epoch={log.epoch} loss_pir={r.loss_pir!r} loss_pce={r.loss_pce!r} "
            f"loss_dm={r.loss_dm!r} total={r.total!r} train_mae={log.train_mae!r} "
            f"val_mae={log.val_mae!r} val_rmse={log.val_rmse!r}")


def _find_bad_parameter(model: CrowdCounter) -> str:
    for name, t in model.named_parameters():
        if not np.isfinite(t.data).all():
            return name
        if t.grad is not None and not np.isfinite(t.grad).all():
            return name
    return "loss"


class Trainer:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        seeds = seed_stream((cfg.seed, 0x7EA1)).spawn(3)
        self.model = build_model(cfg, seed=seeds[0])
        if cfg.afe_checkpoint:
            load_prefix(cfg.afe_checkpoint, self.model, "audio_net.")
        self.optimizer = Adam(self.model.named_parameters(), lr=cfg.lr,
                              beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                              weight_decay=cfg.weight_decay)
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.data = SceneDataset(cfg.data_dir, load_audio=cfg.uses_audio)
        val_dir = cfg.val_dir or cfg.data_dir
        self.val_data = (self.data if val_dir == cfg.data_dir
                         else SceneDataset(val_dir, load_audio=cfg.uses_audio))
        self.zero_count_images = 0
        self._param_names = [name for name, _ in self.model.named_parameters()]
        self._params = [t for _, t in self.model.named_parameters()]
        self._id_to_slot = {id(t): i for i, t in enumerate(self._params)}
        self.dtype = cfg.np_dtype()
        os.makedirs(cfg.out_dir, exist_ok=True)

    # ------------------------------------------------------------------
    def header_lines(self) -> list[str]:
        cfg = self.cfg
        flags = [name for name in ("no_pir", "no_pce", "no_avt", "no_ccm",
                                   "no_audio_in_fusion", "single_branch", "cc_v")
                 if getattr(cfg, name)]
        return [
            f"# geometry={cfg.geometry} schedule={cfg.schedule} "
            f"flags={','.join(flags) or 'none'}",
            f"# losses={'+'.join(cfg.active_losses())} "
            f"params={self.model.parameter_count()} seed={cfg.seed}",
        ]

    def _sample_inputs(self, dataset: SceneDataset, index: int,
                       augment_key=None):
        image = dataset.image(index)
        if augment_key is not None and self.cfg.occlude_prob > 0.0:
            rng = np.random.default_rng(
                seed_stream((self.cfg.seed, 0x0CC1) + tuple(augment_key)))
            if rng.random() < self.cfg.occlude_prob:
                rate = rng.uniform(0.0, self.cfg.occlude_max)
                spec = DegradationSpec("occlusion", occlusion_rate=rate)
                image = degrade(image, spec, int(rng.integers(2**31)))
        points = dataset.points(index)
        geo = self.cfg.geo
        gt_density = make_density_map(points, geo.width, geo.height)
        gt_counts = patch_counts(points, geo.patch_grid)
        lms = dataset.log_mel(index)
        image_t = Tensor(image.astype(self.dtype))
        lms_t = Tensor(lms.astype(self.dtype)) if lms is not None else None
        return image_t, lms_t, gt_density, gt_counts

    def _run_sample(self, index: int, epoch: int, step: int, slot: int):
        """Forward+backward for one sample; returns (grads, report, est, truth)."""
        rekey_dropout(self.model, epoch, step, slot)
        image_t, lms_t, gt_density, gt_counts = self._sample_inputs(
            self.data, index, augment_key=(epoch, step, slot))
        with Tape() as tape:
            output = self.model(image_t, lms_t)
            total, report = self.model.loss(output, gt_density, gt_counts)
            grads = tape.backward(total, into={})
        if self.model.supervise_pce and not report.has_pce:
            report.has_pce = True  # counted, not an ablation
            self.zero_count_images += 1
        by_slot = {self._id_to_slot[k]: g for k, g in grads.items()
                   if k in self._id_to_slot}
        return by_slot, report, output.count, float(gt_counts.sum())

    def _train_epoch(self, epoch: int, pool: ThreadPoolExecutor | None):
        cfg = self.cfg
        order = self.shuffle_rng.permutation(len(self.data))
        lr = lr_schedule(cfg.lr, cfg.lr_decay, epoch)
        epoch_report = LossReport()
        estimates: list[float] = []
        truths: list[float] = []
        n_samples = 0
        for step in range(0, len(order), cfg.batch_size):
            batch = order[step : step + cfg.batch_size]
            args = [(int(idx), epoch, step, slot)
                    for slot, idx in enumerate(batch)]
            try:
                if pool is None:
                    results = [self._run_sample(*a) for a in args]
                else:
                    results = list(pool.map(lambda a: self._run_sample(*a), args))
            except DivergenceError as exc:
                raise DivergenceError(
                    f"{exc} (epoch {epoch}, first bad parameter: "
                    f"{_find_bad_parameter(self.model)})") from None
            self.optimizer.zero_grad()
            scale = 1.0 / len(batch)
            merged: dict[int, np.ndarray] = {}
            for grads, report, est, truth in results:
                for slot_id, g in grads.items():
                    if slot_id in merged:
                        merged[slot_id] = merged[slot_id] + g
                    else:
                        merged[slot_id] = g
                epoch_report = epoch_report + report
                estimates.append(est)
                truths.append(truth)
                n_samples += 1
            for slot_id, g in merged.items():
                self._params[slot_id].grad = g * scale
            self.optimizer.step(lr)
        train_mae, _ = mae_rmse(estimates, truths)
        return epoch_report.scaled(1.0 / max(n_samples, 1)), train_mae

    def _validate(self) -> tuple[float, float]:
        self.model.set_training(False)
        estimates = []
        truths = []
        for i in range(len(self.val_data)):
            image_t, lms_t, _, gt_counts = self._sample_inputs(self.val_data, i)
            output = self.model(image_t, lms_t)
            estimates.append(output.count)
            truths.append(float(gt_counts.sum()))
        self.model.set_training(True)
        return mae_rmse(estimates, truths)

    def train(self) -> list[EpochLog]:
        cfg = self.cfg
        logs: list[EpochLog] = []
        log_path = os.path.join(cfg.out_dir, "metrics.log")
        pool = (ThreadPoolExecutor(max_workers=cfg.threads)
                if cfg.threads > 1 else None)
        self.model.set_training(True)
        try:
            with open(log_path, "w", encoding="ascii") as fh:
                for line in self.header_lines():
                    fh.write(line + "\n")
                for epoch in range(cfg.epochs):
                    report, train_mae = self._train_epoch(epoch, pool)
                    val_mae = val_rmse = float("nan")
                    if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                        val_mae, val_rmse = self._validate()
                    entry = EpochLog(epoch, report, train_mae, val_mae, val_rmse)
                    logs.append(entry)
                    fh.write(_format_epoch(entry) + "\n")
                    fh.flush()
                    if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                        self._save(os.path.join(cfg.out_dir,
                                                f"checkpoint_{epoch:04d}.avcc"),
                                   epoch)
                fh.write(f"# zero_count_images={self.zero_count_images}\n")
            self._save(os.path.join(cfg.out_dir, "checkpoint_final.avcc"),
                       cfg.epochs - 1)
        finally:
            if pool is not None:
                pool.shutdown()
        return logs

    def _save(self, path: str, epoch: int) -> None:
        save_checkpoint(path, self.model, epoch=epoch,
                        optimizer=self.optimizer, rng=self.shuffle_rng)


def train(cfg: Config) -> list[EpochLog]:
    return Trainer(cfg).train()


def evaluate(cfg: Config, checkpoint: str | None = None,
             model: CrowdCounter | None = None,
             degradation: DegradationSpec | None = None,
             or_sweep: list[float] | None = None,
             data_dir: str | None = None) -> str:
    """Run eval-mode inference over a dataset and format a report.

    Degradations touch the image only; audio is never degraded.  An OR sweep
    evaluates the occlusion setting once per rate and emits one summary line
    per rate.
    """
    if or_sweep is not None and degradation is not None:
        raise UsageError("pass either a degradation or an OR sweep, not both")
    model = model if model is not None else build_model(cfg)
    if checkpoint:
        load_checkpoint(checkpoint, model)
    model.set_training(False)
    data = SceneDataset(data_dir or cfg.data_dir, load_audio=cfg.uses_audio)
    geo = cfg.geo
    dtype = cfg.np_dtype()

    def run_pass(spec: DegradationSpec | None):
        estimates = []
        truths = []
        for i in range(len(data)):
            image = data.image(i)
            if spec is not None:
                image = degrade(image, spec, seed=int(cfg.seed) * 100003 + i)
            lms = data.log_mel(i)
            output = model(Tensor(image.astype(dtype)),
                           Tensor(lms.astype(dtype)) if lms is not None else None)
            estimates.append(output.count)
            truths.append(float(len(data.points(i))))
        return estimates, truths

    lines = [f"# dataset={data.directory} n={len(data)} "
             f"checkpoint={checkpoint or 'none'}"]
    if or_sweep is not None:
        for rate in or_sweep:
            spec = DegradationSpec("occlusion", occlusion_rate=rate)
            estimates, truths = run_pass(spec)
            mae, rmse = mae_rmse(estimates, truths)
            lines.append(f"or={rate!r} mae={mae!r} rmse={rmse!r}")
    else:
        estimates, truths = run_pass(degradation)
        for i, (t, e) in enumerate(zip(truths, estimates)):
            lines.append(f"{i} {t!r} {e!r}")
        mae, rmse = mae_rmse(estimates, truths)
        lines.append(f"mae={mae!r} rmse={rmse!r}")
    return "\n".join(lines) + "\n"
