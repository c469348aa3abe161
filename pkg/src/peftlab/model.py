"""Toy clip-question-answer network with adapter injection points.

The vision encoder deliberately has no cross-frame pathway of its own:
every block applies per-frame spatial attention over the P patch tokens
plus a per-token MLP, so two clips that are frame permutations of each
other produce identical pooled features.  Whatever temporal reasoning the
model exhibits therefore has to come from the attached adapters.

Injection points follow one policy for every method: in each vision block
the fused qkv projection and the output projection are wrapped; in the
question encoder the q, k, v, and output projections are wrapped with
the standard full-weight-decomposition adapter.  The classifier head over
the answer vocabulary is trainable in every configuration.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .adapters import AdaptedLinear, FrozenLinear, make_adapter
from .operators import ConfigError
from .optim import Adam, average_gradients, zero_gradients
from .rng import SplitMix64, derive_seed
from .tensor import Tensor, record

__all__ = [
    "VisionBlock",
    "QuestionEncoder",
    "FusionHead",
    "ToyVQAModel",
    "build_model",
    "wrap_model",
    "freeze_backbone",
    "pretrain_backbone",
]


def _gauss(rng: SplitMix64, shape, std: float) -> np.ndarray:
    return np.asarray(rng.normals(int(np.prod(shape)), std=std)).reshape(shape)


class LayerNorm:
    def __init__(self, width: int):
        self.gain = Tensor(np.ones(width))
        self.bias = Tensor(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def tensors(self):
        return [("gain", self.gain), ("bias", self.bias)]


class MLP:
    """Two-layer gelu MLP, width C -> 2C -> C."""

    def __init__(self, width: int, rng: SplitMix64):
        hidden = 2 * width
        self.w1 = Tensor(_gauss(rng.split("w1"), (width, hidden), 1.0 / math.sqrt(width)))
        self.b1 = Tensor(np.zeros(hidden))
        self.w2 = Tensor(_gauss(rng.split("w2"), (hidden, width), 1.0 / math.sqrt(hidden)))
        self.b2 = Tensor(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def tensors(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, C] -> [..., H, N, C/H]"""
    *lead, n, c = x.shape
    x = T.reshape(x, (*lead, n, heads, c // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., H, N, hd] -> [..., N, H*hd]"""
    *lead, h, n, hd = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, n, h * hd))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis."""
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    nd = qh.ndim
    scores = T.scale(T.matmul(qh, T.transpose(kh, list(range(nd - 2)) + [nd - 1, nd - 2])),
                     1.0 / math.sqrt(qh.shape[-1]))
    return _merge_heads(T.matmul(T.softmax(scores), vh))


class VisionBlock:
    """Pre-norm transformer block attending over the P spatial tokens of
    each frame independently; the fused qkv and output projections carry
    the adapter injection points."""

    def __init__(self, width: int, heads: int, rng: SplitMix64, name: str):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.ln1 = LayerNorm(width)
        self.qkv = AdaptedLinear(
            FrozenLinear(_gauss(rng.split("qkv"), (width, 3 * width), 1.0 / math.sqrt(width)),
                         np.zeros(3 * width)), name=f"{name}.qkv")
        self.proj = AdaptedLinear(
            FrozenLinear(_gauss(rng.split("proj"), (width, width), 1.0 / math.sqrt(width)),
                         np.zeros(width)), name=f"{name}.proj")
        self.ln2 = LayerNorm(width)
        self.mlp = MLP(width, rng.split("mlp"))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        qkv = self.qkv(h)  # [B,T,P,3C]
        c = self.width
        q = T.slice_axis(qkv, 3, 0, c)
        k = T.slice_axis(qkv, 3, c, 2 * c)
        v = T.slice_axis(qkv, 3, 2 * c, 3 * c)
        x = T.add(x, self.proj(_attend(q, k, v, self.heads)))
        return T.add(x, self.mlp(self.ln2(x)))

    def adapted_layers(self):
        return [("qkv", self.qkv), ("proj", self.proj)]

    def tensors(self):
        out = [(f"ln1.{n}", p) for n, p in self.ln1.tensors()]
        for lname, layer in self.adapted_layers():
            out.append((f"{lname}.w0", layer.base.w0))
            out.append((f"{lname}.bias", layer.base.bias))
        out += [(f"ln2.{n}", p) for n, p in self.ln2.tensors()]
        out += [(f"mlp.{n}", p) for n, p in self.mlp.tensors()]
        return out


class QuestionEncoder:
    """Token embeddings plus one pre-norm transformer block over the token
    sequence, mean-pooled.  Residual connections keep a plain bag-of-words
    component in the pooled output, which is what lets held-out phrasings
    ride on their in-vocabulary anchor words."""

    def __init__(self, vocab_size: int, width: int, heads: int, rng: SplitMix64):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.vocab_size = vocab_size
        self.width = width
        self.heads = heads
        embed = _gauss(rng.split("embed"), (vocab_size, width),
                       1.0 / math.sqrt(width))
        # id 0 is the unknown-word bucket; a zero row keeps novel words from
        # injecting an arbitrary direction into the pooled question vector
        embed[0] = 0.0
        self.embed = Tensor(embed)
        self.ln1 = LayerNorm(width)
        std = 1.0 / math.sqrt(width)
        self.q = AdaptedLinear(FrozenLinear(_gauss(rng.split("q"), (width, width), std),
                                            np.zeros(width)), name="question.q")
        self.k = AdaptedLinear(FrozenLinear(_gauss(rng.split("k"), (width, width), std),
                                            np.zeros(width)), name="question.k")
        self.v = AdaptedLinear(FrozenLinear(_gauss(rng.split("v"), (width, width), std),
                                            np.zeros(width)), name="question.v")
        self.out = AdaptedLinear(FrozenLinear(_gauss(rng.split("out"), (width, width), std),
                                              np.zeros(width)), name="question.out")
        self.ln2 = LayerNorm(width)
        self.mlp = MLP(width, rng.split("mlp"))

    def __call__(self, token_ids) -> Tensor:
        ids = list(token_ids)
        if not ids:
            raise ConfigError("empty question")
        bad = [i for i in ids if not 0 <= i < self.vocab_size]
        if bad:
            raise ConfigError(f"token id {bad[0]} outside vocabulary of size {self.vocab_size}")
        e = T.embedding(self.embed, ids)  # [L,C]
        h = self.ln1(e)
        ctx = _attend(self.q(h), self.k(h), self.v(h), self.heads)
        e = T.add(e, self.out(ctx))
        e = T.add(e, self.mlp(self.ln2(e)))
        return T.reduce_mean(e, axis=0)  # [C]

    def adapted_layers(self):
        return [("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)]

    def tensors(self):
        out = [("embed", self.embed)]
        out += [(f"ln1.{n}", p) for n, p in self.ln1.tensors()]
        for lname, layer in self.adapted_layers():
            out.append((f"{lname}.w0", layer.base.w0))
            out.append((f"{lname}.bias", layer.base.bias))
        out += [(f"ln2.{n}", p) for n, p in self.ln2.tensors()]
        out += [(f"mlp.{n}", p) for n, p in self.mlp.tensors()]
        return out


class FusionHead:
    """Linear classifier over concat(vision pooled, question pooled)."""

    def __init__(self, width: int, n_answers: int, rng: SplitMix64):
        self.w = Tensor(_gauss(rng.split("w"), (2 * width, n_answers),
                               1.0 / math.sqrt(2 * width)), requires_grad=True)
        self.b = Tensor(np.zeros(n_answers), requires_grad=True)

    def __call__(self, vision: Tensor, question: Tensor) -> Tensor:
        width = vision.shape[0] + question.shape[0]
        fused = T.reshape(T.concat([vision, question], axis=0), (1, width))
        logits = T.add(T.matmul(fused, self.w), self.b)
        return T.reshape(logits, (logits.shape[1],))

    def tensors(self):
        return [("w", self.w), ("b", self.b)]


class ToyVQAModel:
    def __init__(self, vocab_size: int, n_answers: int, rng: SplitMix64,
                 width: int = 32, patches: int = 4, frames: int = 8,
                 d_raw: int = 8, heads: int = 4, n_blocks: int = 2):
        self.width = width
        self.patches = patches
        self.frames = frames
        self.d_raw = d_raw
        self.n_answers = n_answers
        self.embedder = FrozenLinear(
            _gauss(rng.split("embedder"), (d_raw, width), 1.0 / math.sqrt(d_raw)),
            np.zeros(width))
        self.blocks = [VisionBlock(width, heads, rng.split(f"vision.{i}"), f"vision.blocks.{i}")
                       for i in range(n_blocks)]
        self.question = QuestionEncoder(vocab_size, width, heads, rng.split("question"))
        self.head = FusionHead(width, n_answers, rng.split("head"))

    # -- forward ---------------------------------------------------------

    def encode_clip(self, features: np.ndarray) -> Tensor:
        """[T,P,D_raw] -> pooled [C]"""
        t, p, d = features.shape
        if d != self.d_raw:
            raise ConfigError(f"clip has {d} raw channels, model expects {self.d_raw}")
        x = Tensor(np.asarray(features, dtype=np.float64).reshape(1, t, p, d))
        x = self.embedder(x)
        for block in self.blocks:
            x = block(x)
        pooled = T.reduce_mean(T.reduce_mean(x, axis=1), axis=1)  # [1,C]
        return T.reshape(pooled, (self.width,))

    def encode_frame(self, frame: np.ndarray) -> Tensor:
        """[P,D_raw] -> pooled [C]; the single-frame pretraining pathway."""
        return self.encode_clip(np.asarray(frame)[None, :, :])

    def forward(self, features: np.ndarray, token_ids) -> Tensor:
        return self.head(self.encode_clip(features), self.question(token_ids))

    def predict(self, features: np.ndarray, token_ids) -> int:
        return int(np.argmax(self.forward(features, token_ids).data))

    # -- parameter bookkeeping ------------------------------------------

    def adapted_layers(self):
        out = []
        for i, block in enumerate(self.blocks):
            for lname, layer in block.adapted_layers():
                out.append((f"vision.blocks.{i}.{lname}", layer))
        for lname, layer in self.question.adapted_layers():
            out.append((f"question.{lname}", layer))
        return out

    def backbone_tensors(self):
        out = [("embedder.w0", self.embedder.w0), ("embedder.bias", self.embedder.bias)]
        for i, block in enumerate(self.blocks):
            out += [(f"vision.blocks.{i}.{n}", p) for n, p in block.tensors()]
        out += [(f"question.{n}", p) for n, p in self.question.tensors()]
        return out

    def named_tensors(self):
        """Every tensor with its current trainability flag; checkpoint order."""
        out = [(n, p, p.requires_grad) for n, p in self.backbone_tensors()]
        for lname, layer in self.adapted_layers():
            out += [(f"{lname}.{n}", p, p.requires_grad) for n, p in layer.named_params()]
        out += [(f"head.{n}", p, p.requires_grad) for n, p in self.head.tensors()]
        return out

    def trainable_params(self):
        return [(n, p) for n, p, flag in self.named_tensors() if flag]


def build_model(seed: int, vocab_size: int, n_answers: int, **dims) -> ToyVQAModel:
    return ToyVQAModel(vocab_size, n_answers, SplitMix64(derive_seed(seed, "model")), **dims)


def freeze_backbone(model: ToyVQAModel) -> ToyVQAModel:
    for _, p in model.backbone_tensors():
        p.requires_grad = False
        p.grad = None
    return model


def wrap_model(model: ToyVQAModel, kind: str, rng: SplitMix64, *, r: int = 8,
               alpha: float | None = None, operator: str = "mha", heads: int = 4,
               pos_embed: bool = True, t_max: int | None = None, d_st: int | None = None,
               k_t: int = 3, epsilon: float = 1e-8, question_kind: str = "dora",
               question_r: int | None = None) -> ToyVQAModel:
    """Attach the configured vision adapter to every injection point and
    standard full-weight DoRA to the question encoder; kind "none" leaves
    the model entirely unadapted."""
    normalized = kind.lower().replace("+", "_").replace("-", "_")
    if normalized == "none":
        return model
    if t_max is None:
        t_max = model.frames
    for name, layer in model.adapted_layers():
        if name.startswith("vision."):
            layer.adapter = make_adapter(
                normalized, layer.base, rng.split(name), r=r, alpha=alpha,
                operator=operator, heads=heads, pos_embed=pos_embed, t_max=t_max,
                d_st=d_st, k_t=k_t, epsilon=epsilon)
        else:
            layer.adapter = make_adapter(
                question_kind, layer.base, rng.split(name),
                r=question_r if question_r is not None else r, epsilon=epsilon)
    return model


def pretrain_backbone(model: ToyVQAModel, samples, *, epochs: int = 2, lr: float = 3e-3,
                      batch: int = 16, holdout_fraction: float = 0.1, seed: int = 0,
                      max_frames: int = 4000) -> dict:
    """Train the vision pathway on single-frame attribute classification
    (tool presence and illumination mode, both readable per frame), then
    freeze every backbone tensor.

    A throwaway linear probe provides the training signal and is dropped
    afterwards.  Raises on NaN loss with the offending step identified.
    """
    rng = SplitMix64(derive_seed(seed, "pretrain"))
    frames = []
    for sample in samples:
        for t in (0, 3, 6):
            frame = sample.features[t]
            frames.append((frame, int(frame[0, 1] > 0.5), int(frame[0, 3] > 0.5)))
        if len(frames) >= max_frames:
            break
    rng.split("order").shuffle(frames)
    n_holdout = max(1, int(len(frames) * holdout_fraction))
    train_frames = frames[:-n_holdout]
    holdout_frames = frames[-n_holdout:]

    probe_rng = rng.split("probe")
    probe_w = Tensor(_gauss(probe_rng, (model.width, 4), 1.0 / math.sqrt(model.width)),
                     requires_grad=True)
    probe_b = Tensor(np.zeros(4), requires_grad=True)

    backbone = model.backbone_tensors()
    for _, p in backbone:
        p.requires_grad = True
    params = backbone + [("probe.w", probe_w), ("probe.b", probe_b)]
    opt = Adam(params, lr)

    def frame_loss(frame, y_tool, y_illum):
        pooled = T.reshape(model.encode_frame(frame), (1, model.width))
        logits = T.reshape(T.add(T.matmul(pooled, probe_w), probe_b), (4,))
        loss = T.add(T.cross_entropy(T.slice_axis(logits, 0, 0, 2), y_tool),
                     T.cross_entropy(T.slice_axis(logits, 0, 2, 4), y_illum))
        return loss, logits

    losses = []
    for epoch in range(epochs):
        order = rng.split(f"epoch.{epoch}").shuffle(list(range(len(train_frames))))
        total = 0.0
        for start in range(0, len(order), batch):
            chunk = order[start:start + batch]
            for idx in chunk:
                frame, y_tool, y_illum = train_frames[idx]
                with record() as tape:
                    loss, _ = frame_loss(frame, y_tool, y_illum)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(
                        f"pretrain loss is not finite at epoch {epoch} frame {idx} seed {seed}")
                total += loss.item()
                tape.backward(loss)
            average_gradients(params, len(chunk))
            opt.step()
            opt.zero_grad()
        losses.append(total / len(order))

    correct = 0
    for frame, y_tool, y_illum in holdout_frames:
        _, logits = frame_loss(frame, y_tool, y_illum)
        pred_tool = int(np.argmax(logits.data[:2]))
        pred_illum = int(np.argmax(logits.data[2:]))
        correct += (pred_tool == y_tool) + (pred_illum == y_illum)
    accuracy = correct / (2 * len(holdout_frames))

    zero_gradients(params)
    freeze_backbone(model)
    return {"holdout_accuracy": accuracy, "epoch_losses": losses,
            "n_train_frames": len(train_frames), "n_holdout_frames": len(holdout_frames)}
