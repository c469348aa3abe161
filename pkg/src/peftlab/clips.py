"""Deterministic synthetic clip-QA corpus generator.

Each sample is an 8-frame clip of P spatial tokens with D_raw feature
channels, a question about one attribute, and a closed-vocabulary answer.
Channel layout per token: 0 = position scalar (mean-centered per clip; its
consecutive deltas carry the motion direction and nothing else does),
1 = tool flag, 2 = occlusion flag, 3 = illumination flag, remaining
channels = Gaussian noise.  Semantic channels are shared across the P
tokens of a frame; noise is drawn per token.

Question construction separates the asked value from the actual state: the
question asks about one value of an attribute ("is the scope advancing?"),
the clip realizes an independently chosen actual value, and the answer is
a yes/no prefix plus the canonical phrase of the *actual* state ("no, the
scope is withdrawing.").  Answers therefore cannot be inferred from the
question text alone, and every attribute contributes four balanced answer
strings.

Templates 0 and 1 of each (attribute, asked value) cell are the training
phrasings; template 2 is reserved for out-of-template evaluation, never
appears in training data, and is worded with words outside the training
vocabulary except for one or two anchor terms that keep the question
answerable.  The state underlying any answer holds on more than 5 of the
8 frames (the duration gate); the opposite state may flicker in on the
remaining frames.

All randomness flows from the corpus seed through one substream per sample
(derived from the global sample index), so parallel and sequential
generation produce identical corpora.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import normalize_tokens
from .rng import SplitMix64, derive_seed

__all__ = [
    "ATTRIBUTES",
    "VALUES",
    "CANONICAL",
    "TEMPLATES",
    "EventSpec",
    "ClipSample",
    "Corpus",
    "ReversePair",
    "Tokenizer",
    "build_tokenizer",
    "answer_string",
    "answer_vocabulary",
    "generate_corpus",
    "reverse_pairs",
    "rule_based_answer",
    "save_corpus",
    "load_corpus",
    "corpus_digest",
    "DEFAULT_SIZES",
]

ATTRIBUTES = ("motion", "tool", "occlusion", "illumination")

VALUES = {
    "motion": ("advancing", "withdrawing"),
    "tool": ("visible", "free"),
    "occlusion": ("occluded", "clear"),
    "illumination": ("white", "nbi"),
}

CANONICAL = {
    ("motion", "advancing"): "the scope is advancing",
    ("motion", "withdrawing"): "the scope is withdrawing",
    ("tool", "visible"): "a tool is visible",
    ("tool", "free"): "the field is tool free",
    ("occlusion", "occluded"): "the view is occluded",
    ("occlusion", "clear"): "the view is clear",
    ("illumination", "white"): "the light is white",
    ("illumination", "nbi"): "the light is narrow band",
}

# templates 0 and 1 are training phrasings; template 2 is evaluation-only.
# held-out phrasings are near-vocabulary paraphrases: every string is novel
# as a whole and carries at least one word outside the training vocabulary,
# the way reviewed paraphrases share most of their wording with the source
TEMPLATES = {
    ("motion", "advancing"): [
        "is the scope advancing during this clip?",
        "does the scope move forward here?",
        "does the scope keep moving forward in this clip?",
    ],
    ("motion", "withdrawing"): [
        "is the scope withdrawing during this clip?",
        "does the scope pull backward here?",
        "does the scope keep moving backward in this clip?",
    ],
    ("tool", "visible"): [
        "is a tool visible in this clip?",
        "can you see a tool in the field?",
        "can you spot a tool in this clip?",
    ],
    ("tool", "free"): [
        "is the field tool free in this clip?",
        "is the field clear of tools here?",
        "is this footage free of tools in the field?",
    ],
    ("occlusion", "occluded"): [
        "is the view occluded in this clip?",
        "is the camera view blocked here?",
        "is the camera view blocked by debris here?",
    ],
    ("occlusion", "clear"): [
        "is the view clear in this clip?",
        "does the camera view stay clear here?",
        "does the view remain clear during this clip?",
    ],
    ("illumination", "white"): [
        "is the light white in this clip?",
        "is white light used here?",
        "was plain white light used in this clip?",
    ],
    ("illumination", "nbi"): [
        "is the light narrow band in this clip?",
        "is narrow band imaging used here?",
        "was narrow band imaging employed in this clip?",
    ],
}

IN_TEMPLATE_IDS = (0, 1)
OUT_TEMPLATE_ID = 2

# flag channels encode the first listed value as 1.0
_FLAG_ONE = {"tool": "visible", "occlusion": "occluded", "illumination": "nbi"}
_FLAG_CHANNEL = {"tool": 1, "occlusion": 2, "illumination": 3}

DEFAULT_SIZES = {"train": 4480, "val": 960, "test": 960}

MIN_ACTIVE_FRAMES = 6  # the > 5 duration gate

FEATURE_MAGIC = b"PFLB"
FEATURE_VERSION = 1
_DTYPE_CODES = {1: np.float32}


def answer_string(attribute: str, asked: str, actual: str) -> str:
    prefix = "yes, " if asked == actual else "no, "
    return prefix + CANONICAL[(attribute, actual)] + "."


def answer_vocabulary() -> list[str]:
    """The closed answer set: yes/no crossed with every canonical phrase."""
    out = set()
    for attribute, values in VALUES.items():
        for asked in values:
            for actual in values:
                out.add(answer_string(attribute, asked, actual))
    return sorted(out)


class Tokenizer:
    """Whitespace/punctuation tokenizer over a fixed vocabulary.

    The vocabulary is built from the training phrasings and the answer
    strings; anything else maps to the reserved unknown id 0.
    """

    UNK = "<unk>"

    def __init__(self, vocab: list[str]):
        self.vocab = vocab
        self.ids = {word: i for i, word in enumerate(vocab)}
        self.unk_id = 0

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.ids.get(tok, self.unk_id) for tok in normalize_tokens(text)]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.vocab).encode()).hexdigest()


def build_tokenizer() -> Tokenizer:
    words = set()
    for (_, _), phrasings in TEMPLATES.items():
        for tid in IN_TEMPLATE_IDS:
            words.update(normalize_tokens(phrasings[tid]))
    for answer in answer_vocabulary():
        words.update(normalize_tokens(answer))
    return Tokenizer([Tokenizer.UNK] + sorted(words))


@dataclass
class EventSpec:
    """Latent state of one attribute within a clip."""

    attribute: str
    value: str
    active_mask: list[bool]
    magnitude: float = 0.0


@dataclass
class ClipSample:
    index: int
    split: str
    phrasing: str
    attribute: str
    asked: str
    actual: str
    template_id: int
    question_text: str
    question_tokens: list[int]
    answer_text: str
    features: np.ndarray  # [T, P, D_raw] f64 (f32-quantized at generation)
    active_mask: list[bool]
    pair_id: int
    sample_seed: int

    @property
    def semantic_id(self) -> tuple[str, str]:
        return (self.attribute, self.actual)


@dataclass
class Corpus:
    seed: int
    config: dict
    samples: list[ClipSample]
    answers: list[str] = field(default_factory=answer_vocabulary)

    def split(self, name: str) -> list[ClipSample]:
        return [s for s in self.samples if s.split == name]

    def answer_id(self, text: str) -> int:
        return self.answers.index(text)


@dataclass
class ReversePair:
    """A motion sample paired with its exact frame reversal."""

    sample: ClipSample
    reversed_features: np.ndarray
    reversed_answer: str


def _motion_trajectory(rng: SplitMix64, value: str, frames: int):
    """Mean-centered position scalar per frame plus the active-frame mask.

    Moving clips place a contiguous window of >5 frames with strictly
    signed per-step deltas; stationary clips are flat.  Centering removes
    the clip-mean so no permutation-invariant statistic carries direction.
    """
    base = 0.2 + 0.6 * rng.next_float()
    traj = np.full(frames, base)
    mask = [False] * frames
    if value != "stationary":
        length = MIN_ACTIVE_FRAMES + rng.next_int(frames - MIN_ACTIVE_FRAMES + 1)
        start = rng.next_int(frames - length + 1)
        sign = 1.0 if value == "advancing" else -1.0
        pos = base
        for step in range(1, length):
            pos += sign * (0.15 + 0.2 * rng.next_float())
            traj[start + step] = pos
        traj[start + length:] = pos
        traj[:start] = base
        for i in range(start, start + length):
            mask[i] = True
    traj = traj - traj.mean()
    return traj, mask


def _flag_series(rng: SplitMix64, attribute: str, value: str, frames: int):
    """0/1 series holding `value` on >5 frames, flickering elsewhere."""
    length = MIN_ACTIVE_FRAMES + rng.next_int(frames - MIN_ACTIVE_FRAMES + 1)
    order = rng.shuffle(list(range(frames)))
    flicker = set(order[:frames - length])
    own = 1.0 if value == _FLAG_ONE[attribute] else 0.0
    series = np.full(frames, own)
    for i in flicker:
        series[i] = 1.0 - own
    mask = [i not in flicker for i in range(frames)]
    return series, mask


def _generate_clip(sample_seed: int, attribute: str, actual: str,
                   frames: int, patches: int, d_raw: int, noise_std: float):
    """Features plus per-attribute events; the target attribute realizes
    `actual`, the others are drawn independently."""
    rng = SplitMix64(sample_seed)
    states = {}
    for attr in ATTRIBUTES:
        if attr == attribute:
            states[attr] = actual
        elif attr == "motion":
            states[attr] = ("advancing", "withdrawing", "stationary")[rng.next_int(3)]
        else:
            states[attr] = VALUES[attr][rng.next_int(2)]

    features = np.zeros((frames, patches, d_raw))
    events = {}
    traj, motion_mask = _motion_trajectory(rng.split("motion"), states["motion"], frames)
    features[:, :, 0] = traj[:, None]
    events["motion"] = EventSpec("motion", states["motion"], motion_mask,
                                 float(np.abs(np.diff(traj)).sum()))
    for attr in ("tool", "occlusion", "illumination"):
        series, mask = _flag_series(rng.split(attr), attr, states[attr], frames)
        features[:, :, _FLAG_CHANNEL[attr]] = series[:, None]
        events[attr] = EventSpec(attr, states[attr], mask)
    noise = rng.split("noise").normals(frames * patches * (d_raw - 4), std=noise_std)
    features[:, :, 4:] = np.asarray(noise).reshape(frames, patches, d_raw - 4)
    # quantize through f32 so in-memory and disk-loaded corpora are bitwise equal
    features = features.astype(np.float32).astype(np.float64)
    return features, events


def _combo_cycle():
    combos = []
    for attribute in ATTRIBUTES:
        for asked in VALUES[attribute]:
            for actual in VALUES[attribute]:
                combos.append((attribute, asked, actual))
    return combos


def generate_corpus(seed: int, sizes: dict | None = None, frames: int = 8,
                    patches: int = 4, d_raw: int = 8, noise_std: float = 0.1) -> Corpus:
    """Build the full corpus deterministically from `seed`.

    Train and val hold in-template phrasings only.  The test split is built
    as pairs: each semantic instance appears twice on the same clip, once
    with a training template and once with the held-out template, so the
    in/out comparison isolates the phrasing shift.  Answers are exactly
    balanced per attribute whenever the split size is a multiple of 16.
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    if sizes["test"] % 2 != 0:
        raise ValueError(f"test split must be even to hold phrasing pairs, got {sizes['test']}")
    tokenizer = build_tokenizer()
    combos = _combo_cycle()
    samples = []
    index = 0

    def make_sample(split, phrasing, template_id, attribute, asked, actual,
                    features, events, pair_id, sample_seed):
        question = TEMPLATES[(attribute, asked)][template_id]
        return ClipSample(
            index=len(samples), split=split, phrasing=phrasing, attribute=attribute,
            asked=asked, actual=actual, template_id=template_id,
            question_text=question, question_tokens=tokenizer.encode(question),
            answer_text=answer_string(attribute, asked, actual),
            features=features, active_mask=list(events[attribute].active_mask),
            pair_id=pair_id, sample_seed=sample_seed,
        )

    for split in ("train", "val"):
        for i in range(sizes[split]):
            attribute, asked, actual = combos[i % len(combos)]
            sample_seed = derive_seed(seed, f"sample.{index}")
            index += 1
            features, events = _generate_clip(sample_seed, attribute, actual,
                                              frames, patches, d_raw, noise_std)
            template_id = IN_TEMPLATE_IDS[SplitMix64(sample_seed).split("template").next_int(2)]
            samples.append(make_sample(split, "in_template", template_id,
                                       attribute, asked, actual, features, events,
                                       pair_id=-1, sample_seed=sample_seed))

    for pair in range(sizes["test"] // 2):
        attribute, asked, actual = combos[pair % len(combos)]
        sample_seed = derive_seed(seed, f"sample.{index}")
        index += 2
        features, events = _generate_clip(sample_seed, attribute, actual,
                                          frames, patches, d_raw, noise_std)
        template_id = IN_TEMPLATE_IDS[SplitMix64(sample_seed).split("template").next_int(2)]
        samples.append(make_sample("test", "in_template", template_id, attribute,
                                   asked, actual, features, events, pair, sample_seed))
        samples.append(make_sample("test", "out_of_template", OUT_TEMPLATE_ID, attribute,
                                   asked, actual, features, events, pair, sample_seed))

    config = {
        "sizes": sizes, "frames": frames, "patches": patches, "d_raw": d_raw,
        "noise_std": noise_std, "source_fps": 30, "source_stride": 4,
        "vocab_hash": tokenizer.vocab_hash,
    }
    return Corpus(seed=seed, config=config, samples=samples)


def reverse_pairs(corpus: Corpus, splits: tuple[str, ...] = ("train", "val", "test")) -> list[ReversePair]:
    """Pair every motion sample with its exact frame reversal.

    Reversal flips the actual motion value, so the paired answer swaps both
    the yes/no prefix and the canonical phrase; the question is unchanged.
    """
    pairs = []
    for sample in corpus.samples:
        if sample.attribute != "motion" or sample.split not in splits:
            continue
        flipped = VALUES["motion"][1 - VALUES["motion"].index(sample.actual)]
        pairs.append(ReversePair(
            sample=sample,
            reversed_features=np.ascontiguousarray(sample.features[::-1]),
            reversed_answer=answer_string("motion", sample.asked, flipped),
        ))
    return pairs


def rule_based_answer(features: np.ndarray, attribute: str, asked: str) -> str:
    """Answer straight from the latent channels; the solvability oracle.

    Motion is read from the sign of the summed position deltas, the flag
    attributes from a majority vote over frames.
    """
    if attribute == "motion":
        total = float(np.diff(features[:, 0, 0]).sum())
        actual = "advancing" if total > 0 else "withdrawing"
    else:
        mean = float(features[:, 0, _FLAG_CHANNEL[attribute]].mean())
        one_value = _FLAG_ONE[attribute]
        values = VALUES[attribute]
        other = values[0] if values[1] == one_value else values[1]
        actual = one_value if mean > 0.5 else other
    return answer_string(attribute, asked, actual)


# ---------------------------------------------------------------------------
# disk format


def _manifest_dict(corpus: Corpus) -> dict:
    return {
        "version": 1,
        "seed": corpus.seed,
        "config": corpus.config,
        "answers": corpus.answers,
        "counts": {name: len(corpus.split(name)) for name in ("train", "val", "test")},
        "samples": [
            {
                "index": s.index, "split": s.split, "phrasing": s.phrasing,
                "attribute": s.attribute, "asked": s.asked, "actual": s.actual,
                "template_id": s.template_id, "question": s.question_text,
                "answer": s.answer_text, "active_mask": [int(b) for b in s.active_mask],
                "pair_id": s.pair_id, "sample_seed": s.sample_seed,
            }
            for s in corpus.samples
        ],
    }


def save_corpus(corpus: Corpus, directory) -> None:
    """Write manifest.json plus features.bin.

    Feature file layout (little-endian): 4-byte magic "PFLB", u32 version,
    u32 dtype code (1 = f32), u32 sample count, u32 T, u32 P, u32 D, then
    count*T*P*D f32 values row-major in manifest order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_dict(corpus)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    cfg = corpus.config
    header = struct.pack("<4sIIIIII", FEATURE_MAGIC, FEATURE_VERSION, 1,
                         len(corpus.samples), cfg["frames"], cfg["patches"], cfg["d_raw"])
    with open(directory / "features.bin", "wb") as fh:
        fh.write(header)
        for sample in corpus.samples:
            fh.write(sample.features.astype("<f4").tobytes())


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    tokenizer = build_tokenizer()
    if manifest["config"]["vocab_hash"] != tokenizer.vocab_hash:
        raise ValueError("corpus was generated with a different template-bank vocabulary")
    raw = (directory / "features.bin").read_bytes()
    magic, version, dtype_code, count, frames, patches, d_raw = struct.unpack_from(
        "<4sIIIIII", raw, 0)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"bad feature file magic {magic!r}")
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature file version {version}")
    dtype = _DTYPE_CODES[dtype_code]
    body = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"),
                         offset=struct.calcsize("<4sIIIIII"))
    expected = count * frames * patches * d_raw
    if body.size != expected:
        raise ValueError(f"feature payload holds {body.size} values, expected {expected}")
    blocks = body.reshape(count, frames, patches, d_raw).astype(np.float64)
    samples = []
    for meta, block in zip(manifest["samples"], blocks):
        samples.append(ClipSample(
            index=meta["index"], split=meta["split"], phrasing=meta["phrasing"],
            attribute=meta["attribute"], asked=meta["asked"], actual=meta["actual"],
            template_id=meta["template_id"], question_text=meta["question"],
            question_tokens=tokenizer.encode(meta["question"]),
            answer_text=meta["answer"], features=np.ascontiguousarray(block),
            active_mask=[bool(b) for b in meta["active_mask"]],
            pair_id=meta["pair_id"], sample_seed=meta["sample_seed"],
        ))
    return Corpus(seed=manifest["seed"], config=manifest["config"], samples=samples,
                  answers=list(manifest["answers"]))


def corpus_digest(directory) -> str:
    """sha256 over manifest.json and features.bin bytes."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for name in ("manifest.json", "features.bin"):
        digest.update((directory / name).read_bytes())
    return digest.hexdigest()
