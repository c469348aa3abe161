"""Training loop with gradient accumulation and best-checkpoint selection.

One optimizer step per `grad_accum` samples; accumulated gradient sums are
averaged before the step, so a step equals one mean-gradient step over the
accumulation window.  After every epoch the validation loss is computed
and the checkpoint is rewritten whenever it improves.  A non-finite loss
aborts immediately with the epoch, sample index, and seed in the message.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .metrics import EvalRecord, MetricReport, aggregate
from .optim import average_gradients, make_optimizer, zero_gradients
from .rng import SplitMix64, derive_seed
from .tensor import record

__all__ = ["TrainingDiverged", "run_training", "dataset_loss", "evaluate_model"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, sample_index: int, seed: int):
        super().__init__(
            f"loss is not finite at epoch {epoch}, sample index {sample_index}, seed {seed}")
        self.epoch = epoch
        self.sample_index = sample_index
        self.seed = seed


def _sample_loss(model, corpus, sample) -> T.Tensor:
    target = corpus.answer_id(sample.answer_text)
    return T.cross_entropy(model.forward(sample.features, sample.question_tokens), target)


def dataset_loss(model, corpus, samples) -> float:
    """Mean cross-entropy without recording gradients."""
    total = 0.0
    for sample in samples:
        total += _sample_loss(model, corpus, sample).item()
    return total / len(samples)


def run_training(model, corpus, *, seed: int, epochs: int = 20, lr: float = 2e-4,
                 batch: int = 1, grad_accum: int = 8, optimizer: str = "adam",
                 checkpoint_path=None, checkpoint_meta: dict | None = None,
                 log=None) -> dict:
    """Returns {"curve": [...], "best_val_loss", "best_epoch"}.

    With epochs=0 the initialization itself is evaluated and checkpointed.
    """
    if batch != 1:
        raise ValueError(f"the schedule fixes batch size 1, got {batch}")
    params = model.trainable_params()
    if not params:
        raise ValueError("model has no trainable parameters")
    opt = make_optimizer(optimizer, params, lr)
    rng = SplitMix64(derive_seed(seed, "train"))
    train = corpus.split("train")
    val = corpus.split("val")

    def save_best(val_loss, epoch):
        if checkpoint_path is None:
            return
        from .checkpoint import save_checkpoint  # local import keeps module load light
        meta = dict(checkpoint_meta or {})
        meta.update({"best_val_loss": val_loss, "best_epoch": epoch, "seed": seed})
        save_checkpoint(checkpoint_path, model.named_tensors(), meta)

    curve = []
    best_val = float("inf")
    best_epoch = -1
    if epochs == 0:
        best_val = dataset_loss(model, corpus, val)
        save_best(best_val, -1)
        return {"curve": [], "best_val_loss": best_val, "best_epoch": -1}

    for epoch in range(epochs):
        order = rng.split(f"epoch.{epoch}").shuffle(list(range(len(train))))
        running = 0.0
        pending = 0
        zero_gradients(params)
        for position, idx in enumerate(order):
            sample = train[idx]
            with record() as tape:
                loss = _sample_loss(model, corpus, sample)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, idx, seed)
            running += loss.item()
            tape.backward(loss)
            pending += 1
            if pending == grad_accum or position == len(order) - 1:
                average_gradients(params, pending)
                opt.step()
                opt.zero_grad()
                pending = 0
        val_loss = dataset_loss(model, corpus, val)
        curve.append({"epoch": epoch, "train_loss": running / len(order),
                      "val_loss": val_loss})
        if log is not None:
            log(f"epoch {epoch:3d}  train {curve[-1]['train_loss']:.4f}  val {val_loss:.4f}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            save_best(val_loss, epoch)
    return {"curve": curve, "best_val_loss": best_val, "best_epoch": best_epoch}


def evaluate_model(model, corpus, splits=("test",)) -> tuple[list[EvalRecord], MetricReport]:
    """Argmax answer per sample, then the metric aggregate over phrasings."""
    records = []
    for name in splits:
        for sample in corpus.split(name):
            pred = corpus.answers[model.predict(sample.features, sample.question_tokens)]
            records.append(EvalRecord(prediction=pred, reference=sample.answer_text,
                                      phrasing=sample.phrasing,
                                      question_type=sample.attribute))
    return records, aggregate(records)
