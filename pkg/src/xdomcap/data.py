"""Vocabulary, tokenization and the synthetic two-domain caption world.

Scenes are tuples of four attributes. Source-domain captions and
target-domain captions describe the same kind of scene with templates
whose function words never overlap, so the two styles are perfectly
separable while the content words (attributes) are shared.
"""
from __future__ import annotations

import itertools
import json
import re
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

ATTRIBUTES = {
    "color": ("red", "blue", "green", "yellow"),
    "shape": ("square", "circle", "triangle"),
    "size": ("small", "large"),
    "position": ("left", "right", "center"),
}
ATTRIBUTE_ORDER = ("color", "shape", "size", "position")

# {slot} is an attribute, [a|b] a synonym choice
SOURCE_TEMPLATES = (
    "a {size} {color} {shape} on the {position}",
    "there is a {size} {color} {shape} [on|at] the {position}",
    "a {color} {shape} [on|at] the {position} which is {size}",
)
TARGET_TEMPLATES = (
    "this {shape} looks {size} and {color} , it sits {position}",
    "this {size} {color} {shape} [sits|rests] {position}",
    "this {color} {shape} [looks|seems] {size} , it [sits|rests] {position}",
)


class DataError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_frequency: int = 1):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.min_frequency = min_frequency
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def tokenize(self, sentence: str) -> list[int]:
        """Whitespace split, wrapped in BOS/EOS; unknown words map to UNK."""
        return [BOS] + [self.id(w) for w in sentence.split()] + [EOS]

    def detokenize(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def has_oov(self, sentence: str) -> bool:
        return any(w not in self._index for w in sentence.split())

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([t for t in Path(path).read_text().split("\n") if t])


def build_vocabulary(corpus: Iterable[str], min_frequency: int = 5) -> Vocabulary:
    counts = Counter(w for s in corpus for w in s.split())
    kept = sorted(w for w, c in counts.items() if c >= min_frequency and w not in RESERVED)
    return Vocabulary(list(RESERVED) + kept, min_frequency)


@dataclass(frozen=True)
class AttributeScene:
    color: str
    shape: str
    size: str
    position: str

    def __post_init__(self):
        for name in ATTRIBUTE_ORDER:
            if getattr(self, name) not in ATTRIBUTES[name]:
                raise DataError(f"bad {name}: {getattr(self, name)!r}")

    def as_dict(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in ATTRIBUTE_ORDER}


def scene_feature(scene: AttributeScene, noise_dims: int = 0, sigma: float = 0.0,
                  rng: np.random.Generator | None = None, shift: float = 0.0) -> np.ndarray:
    """One-hot attribute blocks, then ``noise_dims`` extra dims centred on ``shift``; all jittered by ``sigma``."""
    blocks = []
    for name in ATTRIBUTE_ORDER:
        values = ATTRIBUTES[name]
        onehot = np.zeros(len(values))
        onehot[values.index(getattr(scene, name))] = 1.0
        blocks.append(onehot)
    x = np.concatenate(blocks + [np.full(noise_dims, float(shift))])
    if sigma > 0:
        x = x + rng.normal(0.0, sigma, size=x.shape)
    return x


def decode_feature(x: np.ndarray) -> AttributeScene:
    """Argmax per one-hot block; noise dims are ignored."""
    out = {}
    pos = 0
    for name in ATTRIBUTE_ORDER:
        n = len(ATTRIBUTES[name])
        out[name] = ATTRIBUTES[name][int(np.argmax(x[pos:pos + n]))]
        pos += n
    return AttributeScene(**out)


_SLOT = re.compile(r"\{(\w+)\}|\[([^\]]+)\]")


def render(template: str, scene: AttributeScene, rng: np.random.Generator | None = None) -> str:
    """Fill attribute slots; synonym choices take the first option unless ``rng`` is given."""
    def sub(m):
        if m.group(1):
            return getattr(scene, m.group(1))
        options = m.group(2).split("|")
        return options[0] if rng is None else options[int(rng.integers(len(options)))]
    return _SLOT.sub(sub, template)


def template_skeleton(template: str) -> re.Pattern:
    """Regex matching any rendering of ``template`` with attribute slots wildcarded."""
    parts = []
    pos = 0
    for m in _SLOT.finditer(template):
        parts.append(re.escape(template[pos:m.start()]))
        if m.group(1):
            parts.append(r"\S+")
        else:
            parts.append("(?:" + "|".join(re.escape(o) for o in m.group(2).split("|")) + ")")
        pos = m.end()
    parts.append(re.escape(template[pos:]))
    return re.compile("^" + "".join(parts) + "$")


def function_words(templates: Iterable[str]) -> set[str]:
    words = set()
    for t in templates:
        stripped = re.sub(r"\{\w+\}", " ", t)
        for w in stripped.replace("[", " ").replace("]", " ").replace("|", " ").split():
            words.add(w)
    return words


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    scene: AttributeScene
    feature: np.ndarray
    sentence: str
    tokens: tuple[int, ...]
    domain: str

    def to_json(self) -> dict:
        return {"id": self.id, "domain": self.domain, "scene": self.scene.as_dict(),
                "feature": [float(v) for v in self.feature], "tokens": list(self.tokens),
                "sentence": self.sentence}

    @classmethod
    def from_json(cls, obj: dict) -> "CaptionRecord":
        return cls(obj["id"], AttributeScene(**obj["scene"]), np.asarray(obj["feature"], dtype=np.float64),
                   obj["sentence"], tuple(obj["tokens"]), obj["domain"])


@dataclass
class WorldConfig:
    n_source: int = 2000
    n_target_images: int = 1000
    n_target_sentences: int = 1000
    n_eval: int = 500
    n_finetune: int = 500
    noise_dims: int = 4
    sigma: float = 0.1
    # target images differ from source images only in the mean of the noise dims
    domain_shift: float = 1.0
    min_frequency: int = 5
    t_max: int = 20
    source_templates: tuple[str, ...] = SOURCE_TEMPLATES
    target_templates: tuple[str, ...] = TARGET_TEMPLATES

    @property
    def feature_dim(self) -> int:
        return sum(len(v) for v in ATTRIBUTES.values()) + self.noise_dims


@dataclass
class DatasetBundle:
    vocab: Vocabulary
    source_paired: list[CaptionRecord]
    source_unpaired: list[tuple[CaptionRecord, CaptionRecord]]
    target_images: list[CaptionRecord]
    target_sentences: list[CaptionRecord]
    target_eval: list[CaptionRecord]
    source_eval: list[CaptionRecord] = field(default_factory=list)
    target_finetune: list[CaptionRecord] = field(default_factory=list)
    config: WorldConfig = field(default_factory=WorldConfig)

    def splits(self) -> dict[str, list[CaptionRecord]]:
        return {
            "source_paired": self.source_paired,
            "target_images": self.target_images,
            "target_sentences": self.target_sentences,
            "target_eval": self.target_eval,
            "source_eval": self.source_eval,
            "target_finetune": self.target_finetune,
        }


def random_scene(rng: np.random.Generator) -> AttributeScene:
    return AttributeScene(**{k: ATTRIBUTES[k][int(rng.integers(len(ATTRIBUTES[k])))] for k in ATTRIBUTE_ORDER})


def _make_records(n, prefix, domain, templates, cfg, rng):
    out = []
    for i in range(n):
        scene = random_scene(rng)
        feat = scene_feature(scene, cfg.noise_dims, cfg.sigma, rng, cfg.domain_shift if domain == "target" else 0.0)
        tpl = templates[int(rng.integers(len(templates)))]
        out.append((f"{prefix}{i:05d}", scene, feat, render(tpl, scene, rng), domain))
    return out


def shuffle_unpaired(records: Sequence[CaptionRecord], seed) -> list[tuple[CaptionRecord, CaptionRecord]]:
    """Pair each record's feature with another record's sentence (no fixed points).

    Returns ``(feature_record, sentence_record)`` pairs. The permutation is a
    uniformly random derangement drawn by rejection.
    """
    n = len(records)
    if n < 2:
        raise DataError("shuffle_unpaired needs at least two records")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            break
    return [(records[i], records[int(perm[i])]) for i in range(n)]


def generate_world(cfg: WorldConfig | None = None, seed: int = 0) -> DatasetBundle:
    cfg = cfg or WorldConfig()
    for name in ("n_source", "n_target_images", "n_target_sentences", "n_eval", "n_finetune"):
        if getattr(cfg, name) <= 0:
            raise DataError(f"{name} must be positive")
    if not cfg.source_templates or not cfg.target_templates:
        raise DataError("empty template set")
    rng = np.random.default_rng(seed)
    src = _make_records(cfg.n_source, "src", "source", cfg.source_templates, cfg, rng)
    src_eval = _make_records(cfg.n_eval, "srcev", "source", cfg.source_templates, cfg, rng)
    tgt_img = _make_records(cfg.n_target_images, "tgtimg", "target", cfg.target_templates, cfg, rng)
    tgt_sent = _make_records(cfg.n_target_sentences, "tgtsen", "target", cfg.target_templates, cfg, rng)
    tgt_eval = _make_records(cfg.n_eval, "tgtev", "target", cfg.target_templates, cfg, rng)
    # paired target data for the fine-tuning upper bound; never used by adaptation
    tgt_ft = _make_records(cfg.n_finetune, "tgtft", "target", cfg.target_templates, cfg, rng)

    vocab = build_vocabulary([r[3] for r in src] + [r[3] for r in tgt_sent], cfg.min_frequency)
    if len(vocab) > 10_000:
        raise DataError("vocabulary overflow")

    def records(rows, drop_oov=False):
        out = []
        for rid, scene, feat, sent, dom in rows:
            if drop_oov and vocab.has_oov(sent):
                continue
            toks = vocab.tokenize(sent)
            if len(toks) - 1 > cfg.t_max:
                raise DataError(f"sentence longer than t_max: {sent!r}")
            out.append(CaptionRecord(rid, scene, feat, sent, tuple(toks), dom))
        return out

    source_paired = records(src)
    return DatasetBundle(
        vocab=vocab,
        source_paired=source_paired,
        source_unpaired=shuffle_unpaired(source_paired, seed + 1),
        target_images=records(tgt_img),
        target_sentences=records(tgt_sent, drop_oov=True),
        target_eval=records(tgt_eval),
        source_eval=records(src_eval),
        target_finetune=records(tgt_ft, drop_oov=True),
        config=cfg,
    )


# ---------------------------------------------------------------------------
# files


def write_records(path, records: Iterable[CaptionRecord]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records(path) -> list[CaptionRecord]:
    with open(path) as fh:
        return [CaptionRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def _cfg_to_json(cfg: WorldConfig) -> dict:
    d = asdict(cfg)
    d["source_templates"] = list(cfg.source_templates)
    d["target_templates"] = list(cfg.target_templates)
    return d


def save_bundle(bundle: DatasetBundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(out / "vocab.txt")
    for name, recs in bundle.splits().items():
        write_records(out / f"{name}.jsonl", recs)
    with open(out / "source_unpaired.jsonl", "w") as fh:
        for a, b in bundle.source_unpaired:
            fh.write(json.dumps({"feature_id": a.id, "sentence_id": b.id}) + "\n")
    (out / "world.json").write_text(json.dumps(_cfg_to_json(bundle.config), indent=1))


def load_bundle(data_dir) -> DatasetBundle:
    d = Path(data_dir)
    for name in ("vocab.txt", "source_paired.jsonl", "target_images.jsonl", "target_sentences.jsonl",
                 "target_eval.jsonl", "source_unpaired.jsonl"):
        if not (d / name).exists():
            raise DataError(f"missing split {name} in {d}")
    cfg_json = json.loads((d / "world.json").read_text()) if (d / "world.json").exists() else {}
    if cfg_json:
        cfg_json["source_templates"] = tuple(cfg_json["source_templates"])
        cfg_json["target_templates"] = tuple(cfg_json["target_templates"])
    cfg = WorldConfig(**cfg_json)
    src = read_records(d / "source_paired.jsonl")
    by_id = {r.id: r for r in src}
    unpaired = []
    with open(d / "source_unpaired.jsonl") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                unpaired.append((by_id[o["feature_id"]], by_id[o["sentence_id"]]))

    def optional(name):
        return read_records(d / f"{name}.jsonl") if (d / f"{name}.jsonl").exists() else []

    return DatasetBundle(Vocabulary.load(d / "vocab.txt"), src, unpaired,
                         read_records(d / "target_images.jsonl"), read_records(d / "target_sentences.jsonl"),
                         read_records(d / "target_eval.jsonl"), optional("source_eval"),
                         optional("target_finetune"), cfg)


def all_pairings(n: int) -> list[tuple[int, ...]]:
    """Every derangement of range(n), for distribution checks."""
    return [p for p in itertools.permutations(range(n)) if all(p[i] != i for i in range(n))]
