"""Training drivers: supervised source pretraining and target-domain adaptation.

The adaptation loop owns batching, augmentation draws and the method toggles;
the per-image math lives in losses.py / teaching.py.  Everything random flows
from one numpy generator derived from (seed, stream), so two serial runs with
the same seed and config produce bitwise-identical ledgers and checkpoints.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import apply_mask, make_patch_mask, strong_augment, weak_augment
from .config import RunConfig
from .controller import (
    Action,
    aggregate_uncertainty,
    controller_step,
    new_controller_state,
)
from .detector import DetectorParams, forward, init_detector, loss_and_grad, snapshot
from .evaluation import map50
from .losses import detection_loss_terms, qfl_terms
from .optim import adam_step, clip_grad_norm, init_adam_state
from .reporting import LedgerRow, RunLedger
from .scenes import DomainShiftSpec, ImageSet, LabeledDataset, build_dataset
from .teaching import (
    ema_update,
    generate_pseudo_labels_batch,
    historical_positives,
    labels_in_student_frame,
)

log = logging.getLogger(__name__)

METHODS = ("source_only", "mt_fixed", "mt_mic", "mt_mic_his", "mt_mic_dru", "dru_full")

# fixed stream ids so each consumer of randomness is independent of the others
_SPLIT_STREAMS = {"source_train": 1, "source_val": 2, "target_train": 3, "target_val": 4}
_PRETRAIN_STREAM = 101
_ADAPT_STREAM = 201


@dataclass(frozen=True)
class MethodSpec:
    """Which pieces of the teaching loop a named method enables."""

    name: str
    ema_interval: int = 1
    use_mask: bool = False
    use_historical: bool = False
    use_controller: bool = False

    def __post_init__(self):
        if self.ema_interval < 1:
            raise ValueError("ema_interval must be at least 1")

    @property
    def trains(self):
        return self.name != "source_only"


def parse_method(text, ema_interval=1) -> MethodSpec:
    """Build a MethodSpec from a name like 'dru_full' or 'mt_fixed(4)'."""
    text = text.strip()
    if text.startswith("mt_fixed"):
        inner = text[len("mt_fixed") :]
        if inner.startswith("(") and inner.endswith(")"):
            ema_interval = int(inner[1:-1])
        elif inner:
            raise ValueError(f"cannot parse method {text!r}")
        return MethodSpec(name="mt_fixed", ema_interval=ema_interval)
    table = {
        "source_only": MethodSpec(name="source_only"),
        "mt_mic": MethodSpec(name="mt_mic", ema_interval=ema_interval, use_mask=True),
        "mt_mic_his": MethodSpec(
            name="mt_mic_his", ema_interval=ema_interval, use_mask=True, use_historical=True
        ),
        "mt_mic_dru": MethodSpec(name="mt_mic_dru", use_mask=True, use_controller=True),
        "dru_full": MethodSpec(
            name="dru_full", use_mask=True, use_historical=True, use_controller=True
        ),
    }
    if text not in table:
        raise ValueError(f"unknown method {text!r}, expected one of {METHODS}")
    return table[text]


def split_seed(seed, split):
    if split not in _SPLIT_STREAMS:
        raise ValueError(f"unknown split {split!r}")
    return seed * 10 + _SPLIT_STREAMS[split]


def make_datasets(cfg: RunConfig):
    """The four standard splits; source splits are clean, target splits shifted."""
    clean = DomainShiftSpec()
    shift = cfg.shift_spec()
    return {
        "source_train": build_dataset(
            cfg.n_source_train, "source", clean, split_seed(cfg.seed, "source_train"), cfg.image_size
        ),
        "source_val": build_dataset(
            cfg.n_source_val, "source", clean, split_seed(cfg.seed, "source_val"), cfg.image_size
        ),
        "target_train": build_dataset(
            cfg.n_target_train, "target", shift, split_seed(cfg.seed, "target_train"), cfg.image_size
        ),
        "target_val": build_dataset(
            cfg.n_target_val, "target", shift, split_seed(cfg.seed, "target_val"), cfg.image_size
        ),
    }


def _loss_layers(cfg, n_layers):
    return range(n_layers) if cfg.aux_supervision else [n_layers - 1]


def _batch_detection_loss(out, targets, cfg):
    """Mean over images of the detection loss; targets expose .boxes/.classes."""
    n = len(targets)
    total = out.class_probs.new_zeros(())
    for i, tgt in enumerate(targets):
        tc = np.asarray(tgt.classes, dtype=np.int64)
        tb = torch.from_numpy(np.asarray(tgt.boxes, dtype=np.float64).reshape(-1, 4))
        for layer in _loss_layers(cfg, out.class_probs.shape[0]):
            parts = detection_loss_terms(
                out.class_probs[layer, i],
                out.boxes[layer, i],
                tc,
                tb,
                cfg.loss_weights(),
                cfg.focal_gamma,
                cfg.focal_alpha,
            )
            total = total + parts["total"]
    return total / n


@dataclass
class PretrainResult:
    params: DetectorParams
    source_val_map: float
    target_val_map: float
    history: list  # (step, mean batch loss)


def pretrain_source(cfg: RunConfig, datasets=None, epochs=None) -> PretrainResult:
    """Supervised training on clean source scenes with Hungarian-matched loss."""
    torch.set_num_threads(1)
    if datasets is None:
        datasets = make_datasets(cfg)
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    train = datasets["source_train"]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _PRETRAIN_STREAM)))

    params = init_detector(cfg.detector_config(), cfg.seed)
    adam = init_adam_state(params.tensors)
    steps_per_epoch = len(train) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError("source train split smaller than one batch")

    history = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            images = train.images[idx]
            targets = [train.annotations[int(i)] for i in idx]
            loss, grads = loss_and_grad(
                params, images, lambda out: _batch_detection_loss(out, targets, cfg)
            )
            if cfg.grad_clip_norm > 0:
                grads = clip_grad_norm(grads, cfg.grad_clip_norm)
            tensors, adam = adam_step(params.tensors, grads, adam, cfg.learning_rate)
            params = DetectorParams(params.config, tensors)
            step += 1
            if step % cfg.eval_every == 0 or step == 1:
                history.append((step, loss))
        log.info(
            "pretrain epoch %d/%d loss %.4f elapsed %.0fs",
            epoch + 1,
            epochs,
            loss,
            time.perf_counter() - t0,
        )

    source_map = map50(params, datasets["source_val"], cfg.eval_score_floor).mean
    target_map = map50(params, datasets["target_val"], cfg.eval_score_floor).mean
    log.info("pretrain done: source val mAP %.4f target val mAP %.4f", source_map, target_map)
    return PretrainResult(
        params=params, source_val_map=source_map, target_val_map=target_map, history=history
    )


@dataclass
class AdaptResult:
    teacher: DetectorParams
    student: DetectorParams
    ledger: RunLedger
    events: list = field(default_factory=list)  # (step, Action)
    controller_state: object = None


def _probe_images(target_val: LabeledDataset, cfg: RunConfig):
    n = min(cfg.uncertainty_probe_images, len(target_val))
    return target_val.images[:n]


def adapt(
    source: DetectorParams,
    method: MethodSpec,
    target_train: ImageSet,
    target_val: LabeledDataset,
    cfg: RunConfig,
    epochs=None,
    eval_every=None,
) -> AdaptResult:
    """Self-train on unlabeled target images; labels enter only through eval.

    The teacher starts as a copy of the source model and is the deliverable.
    Per batch: the teacher pseudo-labels the weak view, the student learns on
    the strong (and optionally masked) view, then either the window controller
    or the fixed-interval EMA updates the teacher.  The ledger gets a row at
    step 0, every eval_every steps and at the last step.
    """
    torch.set_num_threads(1)
    epochs = cfg.adapt_epochs if epochs is None else epochs
    eval_every = cfg.eval_every if eval_every is None else eval_every
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _ADAPT_STREAM)))

    student = snapshot(source)
    teacher = snapshot(source)
    adam = init_adam_state(student.tensors)
    probe = _probe_images(target_val, cfg)
    size = cfg.image_size

    state = new_controller_state(student, cfg.meta_window) if method.use_controller else None
    # fixed-period snapshot feeding the historical loss when no controller runs
    his_snap = snapshot(student) if method.use_historical else None
    his_count = 0

    steps_per_epoch = len(target_train) // cfg.batch_size
    total_steps = steps_per_epoch * epochs if method.trains else 0
    if method.trains and steps_per_epoch == 0:
        raise ValueError("target train split smaller than one batch")

    ledger = RunLedger()
    events = []
    t0 = time.perf_counter()

    def emit_row(step):
        u = aggregate_uncertainty(student, [probe], cfg.uncertainty_aggregate)
        row = LedgerRow(
            step=step,
            epoch=step // steps_per_epoch if steps_per_epoch else 0,
            student_map50=map50(student, target_val, cfg.eval_score_floor).mean,
            teacher_map50=map50(teacher, target_val, cfg.eval_score_floor).mean,
            mean_uncertainty=u,
            teacher_updates=state.teacher_updates if state else fixed_updates,
            student_retrains=state.student_retrains if state else 0,
            wallclock_s=time.perf_counter() - t0,
        )
        ledger.append(row)
        log.info(
            "%s step %d student %.4f teacher %.4f U %.3g updates %d retrains %d",
            method.name,
            row.step,
            row.student_map50,
            row.teacher_map50,
            row.mean_uncertainty,
            row.teacher_updates,
            row.student_retrains,
        )

    fixed_updates = 0
    emit_row(0)

    step = 0
    for _ in range(epochs if method.trains else 0):
        order = rng.permutation(len(target_train))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            raw = target_train.images[idx]

            weak_imgs, weak_recs = [], []
            for img in raw:
                wi, wr = weak_augment(img, rng)
                weak_imgs.append(wi)
                weak_recs.append(wr)
            pseudo = generate_pseudo_labels_batch(
                teacher, np.stack(weak_imgs), cfg.pseudo_threshold, weak_recs
            )

            strong_imgs, strong_recs = [], []
            for img in raw:
                si, sr = strong_augment(img, rng)
                strong_imgs.append(si)
                strong_recs.append(sr)
            targets = [
                labels_in_student_frame(ps, rec) for ps, rec in zip(pseudo, strong_recs)
            ]

            views = list(strong_imgs)
            if method.use_mask:
                masks = [
                    make_patch_mask(size, size, cfg.mask_patch_size, cfg.mask_ratio, rng)
                    for _ in range(len(raw))
                ]
                views += [apply_mask(s, m) for s, m in zip(strong_imgs, masks)]
            student_in = np.stack(views)

            positives = None
            if method.use_historical:
                his_model = state.window_start if method.use_controller else his_snap
                with torch.no_grad():
                    snap_out = forward(his_model, student_in)
                positives = [
                    historical_positives(
                        snap_out.final_probs[i].numpy(), cfg.historical_threshold
                    )
                    for i in range(len(views))
                ]

            loss_spec = _build_student_loss(targets, positives, method, cfg)
            loss, grads = loss_and_grad(student, student_in, loss_spec)
            if cfg.grad_clip_norm > 0:
                grads = clip_grad_norm(grads, cfg.grad_clip_norm)
            tensors, adam = adam_step(student.tensors, grads, adam, cfg.learning_rate)
            student = DetectorParams(student.config, tensors)
            step += 1

            if method.use_controller:
                state, teacher, student, adam, action = controller_step(
                    state, teacher, student, raw, cfg.ema_alpha, adam,
                    cfg.uncertainty_aggregate,
                )
                if action is not Action.NONE:
                    events.append((step, action))
            else:
                if step % method.ema_interval == 0:
                    teacher = ema_update(teacher, student, cfg.ema_alpha)
                    fixed_updates += 1
                    events.append((step, Action.TEACHER_UPDATED))
                if method.use_historical:
                    his_count += 1
                    if his_count >= cfg.meta_window:
                        his_snap = snapshot(student)
                        his_count = 0

            if step % eval_every == 0 or step == total_steps:
                emit_row(step)

    return AdaptResult(
        teacher=teacher,
        student=student,
        ledger=ledger,
        events=events,
        controller_state=state,
    )


def _build_student_loss(targets, positives, method: MethodSpec, cfg: RunConfig):
    """Closure over one batch's labels; mean over images of the per-image loss."""
    n = len(targets)
    weights = cfg.loss_weights()

    def loss_spec(out):
        total = out.class_probs.new_zeros(())
        for i in range(n):
            tgt = targets[i]
            tc = np.asarray(tgt.classes, dtype=np.int64)
            tb = torch.from_numpy(np.asarray(tgt.boxes, dtype=np.float64).reshape(-1, 4))
            view_ids = [i, n + i] if method.use_mask else [i]
            for v in view_ids:
                for layer in _loss_layers(cfg, out.class_probs.shape[0]):
                    parts = detection_loss_terms(
                        out.class_probs[layer, v],
                        out.boxes[layer, v],
                        tc,
                        tb,
                        weights,
                        cfg.focal_gamma,
                        cfg.focal_alpha,
                    )
                    total = total + parts["total"]
                if positives is not None:
                    total = total + qfl_terms(
                        out.final_probs[v], positives[v], cfg.qfl_gamma
                    )
        return total / n

    return loss_spec
