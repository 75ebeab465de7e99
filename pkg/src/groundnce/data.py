"""Dataset ingestion and the synthetic corpus with planted alignments.

On disk a dataset is a JSON manifest pointing at a binary feature blob
(magic ``IGFB``) and a JSON-lines annotation file. Feature payloads are
float32 little-endian; everything is widened to float64 on load.

The synthetic generator plants a ground-truth word-region correspondence:
a vocabulary of noun words is partitioned into synonym clusters that share
a visual prototype, clusters are grouped into visually-confusable groups,
and every image lays regions out on a non-overlapping grid so that a
region's box doubles as the phrase's ground-truth box. A matching
table-backed language model is emitted whose masked distribution
concentrates on the true word's group and whose conditioned distribution
concentrates on the true word and its synonym cluster.

Phrase annotations live only on :class:`GroundingExample`; training
batches carry (regions, caption) pairs and nothing else, so no training
code path can read ground truth.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .attention import CaptionTokens, RegionSet
from .errors import DataFormatError, ShapeError
from .losses import TrainBatch
from .negcap import TableLm, context_signature, caption_signature, sentence_context_vector
from .rng import substream
from .validation import POS_LABELS

BLOB_MAGIC = b"IGFB"
BLOB_VERSION = 1

DEFAULT_MAX_REGIONS = 30

# Probability masses of the synthetic language model. p(.|context) spreads
# over the contextually plausible words (the true word's scene, or its
# confusion group when there is a single scene) versus everything else.
# q(.|word, context) concentrates on the true word, its synonyms, and the
# nouns mentioned elsewhere in the caption (copy bias): all of these are
# likely true of the image, which is what lets the ratio re-ranking demote
# them and keep plausible-but-false substitutions.
P_PLAUSIBLE = 0.7
P_OTHER = 0.3
Q_ORIGINAL = 0.2
Q_SYNONYM = 0.35
Q_MENTIONED = 0.2
Q_PLAUSIBLE = 0.1
Q_OTHER = 0.15


@dataclass
class Phrase:
    """Annotated phrase span with its ground-truth box(es). Evaluation only."""

    span: tuple[int, int]
    boxes: np.ndarray

    def __post_init__(self) -> None:
        start, end = self.span
        if not 0 <= start < end:
            raise ShapeError(f"bad span {self.span}")
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.ndim == 1:
            self.boxes = self.boxes[None, :]
        if self.boxes.shape[1:] != (4,):
            raise ShapeError("phrase boxes must be (k, 4)")


@dataclass
class GroundingExample:
    image_id: str
    regions: RegionSet
    caption: CaptionTokens
    phrases: list[Phrase] = field(default_factory=list)

    def __post_init__(self) -> None:
        for phrase in self.phrases:
            if phrase.span[1] > len(self.caption):
                raise ShapeError(
                    f"{self.image_id}: phrase span {phrase.span} exceeds caption length"
                )


@dataclass
class Dataset:
    name: str
    split: str
    d_r: int
    d_w: int
    examples: list[GroundingExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def captions(self) -> list[CaptionTokens]:
        return [ex.caption for ex in self.examples]


@dataclass
class DatasetManifest:
    name: str
    split: str
    d_r: int
    d_w: int
    example_count: int
    features: str
    annotations: str


# ---------------------------------------------------------------------------
# Binary blob + annotations + manifest.
# ---------------------------------------------------------------------------


def _write_blob(path: Path, dataset: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", BLOB_VERSION))
        fh.write(struct.pack("<Q", len(dataset.examples)))
        for ex in dataset.examples:
            encoded = ex.image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            m = ex.regions.count
            fh.write(struct.pack("<II", m, dataset.d_r))
            fh.write(ex.regions.boxes.astype("<f4").tobytes())
            fh.write(ex.regions.features.astype("<f4").tobytes())
            n = len(ex.caption)
            fh.write(struct.pack("<II", n, dataset.d_w))
            fh.write(ex.caption.features.astype("<f4").tobytes())


def _read_blob(path: Path) -> list[dict]:
    raw = path.read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != BLOB_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<Q", raw, 8)
    offset = 16
    records = []
    for idx in range(count):
        try:
            (id_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            image_id = raw[offset : offset + id_len].decode("utf-8")
            offset += id_len
            m, d_r = struct.unpack_from("<II", raw, offset)
            offset += 8
            boxes = np.frombuffer(raw, dtype="<f4", count=m * 4, offset=offset)
            offset += m * 16
            feats = np.frombuffer(raw, dtype="<f4", count=m * d_r, offset=offset)
            offset += m * d_r * 4
            n, d_w = struct.unpack_from("<II", raw, offset)
            offset += 8
            words = np.frombuffer(raw, dtype="<f4", count=n * d_w, offset=offset)
            offset += n * d_w * 4
        except (struct.error, ValueError) as exc:
            raise DataFormatError(f"{path}: record {idx} truncated or corrupt") from exc
        records.append(
            {
                "image_id": image_id,
                "boxes": boxes.reshape(m, 4).astype(np.float64),
                "region_features": feats.reshape(m, d_r).astype(np.float64),
                "word_features": words.reshape(n, d_w).astype(np.float64),
            }
        )
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return records


def save_dataset(dataset: Dataset, out_dir: str | Path, basename: str | None = None) -> Path:
    """Write blob, annotations, and manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    basename = basename or f"{dataset.name}-{dataset.split}"
    blob = out_dir / f"{basename}.igfb"
    annotations = out_dir / f"{basename}.jsonl"
    manifest_path = out_dir / f"{basename}.manifest.json"

    _write_blob(blob, dataset)
    with open(annotations, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            record = {
                "image_id": ex.image_id,
                "tokens": ex.caption.tokens,
                "pos": ex.caption.pos_mask,
                "phrases": [
                    {"span": list(p.span), "boxes": p.boxes.tolist()} for p in ex.phrases
                ],
            }
            fh.write(json.dumps(record) + "\n")
    manifest = {
        "name": dataset.name,
        "split": dataset.split,
        "d_r": dataset.d_r,
        "d_w": dataset.d_w,
        "example_count": len(dataset.examples),
        "features": blob.name,
        "annotations": annotations.name,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def load_manifest(manifest_path: str | Path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    try:
        payload = json.loads(manifest_path.read_text(encoding="utf-8"))
        return DatasetManifest(
            name=payload["name"],
            split=payload["split"],
            d_r=int(payload["d_r"]),
            d_w=int(payload["d_w"]),
            example_count=int(payload["example_count"]),
            features=payload["features"],
            annotations=payload["annotations"],
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{manifest_path}: invalid manifest") from exc


def load_dataset(
    manifest_path: str | Path, max_regions: int = DEFAULT_MAX_REGIONS
) -> Dataset:
    """Load and fully validate a dataset; errors name the offending record."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    blob_records = _read_blob(manifest_path.parent / manifest.features)
    annotations_path = manifest_path.parent / manifest.annotations
    lines = [
        line
        for line in annotations_path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if len(blob_records) != len(lines):
        raise DataFormatError(
            f"{manifest_path}: blob has {len(blob_records)} records, "
            f"annotations have {len(lines)}"
        )
    if len(blob_records) != manifest.example_count:
        raise DataFormatError(
            f"{manifest_path}: manifest declares {manifest.example_count} examples, "
            f"found {len(blob_records)}"
        )

    examples = []
    for idx, (blob, line) in enumerate(zip(blob_records, lines)):
        try:
            ann = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"record {idx}: invalid annotation JSON") from exc
        try:
            if ann["image_id"] != blob["image_id"]:
                raise DataFormatError(
                    f"record {idx}: annotation id {ann['image_id']!r} "
                    f"!= blob id {blob['image_id']!r}"
                )
            if blob["region_features"].shape[1] != manifest.d_r:
                raise DataFormatError(
                    f"record {idx} ({blob['image_id']}): region feature width "
                    f"{blob['region_features'].shape[1]} != manifest d_r {manifest.d_r}"
                )
            if blob["word_features"].shape[1] != manifest.d_w:
                raise DataFormatError(
                    f"record {idx} ({blob['image_id']}): word feature width "
                    f"{blob['word_features'].shape[1]} != manifest d_w {manifest.d_w}"
                )
            if blob["boxes"].shape[0] > max_regions:
                raise DataFormatError(
                    f"record {idx} ({blob['image_id']}): "
                    f"{blob['boxes'].shape[0]} regions exceed cap {max_regions}"
                )
            regions = RegionSet(
                image_id=blob["image_id"],
                boxes=blob["boxes"],
                features=blob["region_features"],
            )
            caption = CaptionTokens(
                tokens=list(ann["tokens"]),
                features=blob["word_features"],
                pos_mask=list(ann["pos"]),
            )
            phrases = [
                Phrase(span=tuple(p["span"]), boxes=np.asarray(p["boxes"]))
                for p in ann.get("phrases", [])
            ]
            examples.append(
                GroundingExample(
                    image_id=blob["image_id"],
                    regions=regions,
                    caption=caption,
                    phrases=phrases,
                )
            )
        except ShapeError as exc:
            raise DataFormatError(f"record {idx}: {exc}") from exc
    return Dataset(
        name=manifest.name,
        split=manifest.split,
        d_r=manifest.d_r,
        d_w=manifest.d_w,
        examples=examples,
    )


def batch_iterator(
    dataset: Dataset, batch_size: int, seed: int, epoch: int
) -> Iterator[TrainBatch]:
    """Seeded shuffle per epoch; a final batch smaller than 2 is dropped."""
    if batch_size < 2:
        raise ShapeError("batch_size must be at least 2")
    order = substream(seed, "shuffle", epoch).permutation(len(dataset.examples))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) < 2:
            return
        yield TrainBatch(
            examples=[
                (dataset.examples[i].regions, dataset.examples[i].caption)
                for i in chunk
            ]
        )


# ---------------------------------------------------------------------------
# Synthetic generator.
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    num_images: int = 500
    regions_per_image: int = 8
    vocab_size: int = 30
    caption_length: int = 8
    noun_fraction: float = 0.6
    d_r: int = 16
    d_w: int = 16
    alignment_noise: float = 0.1
    seed: int = 0
    split: str = "train"
    # Structure knobs for the planted world.
    cluster_size: int = 1        # synonym words per visual class
    group_size: int = 1          # visual classes per word-confusion group
    group_spread: float = 0.5    # how far cluster word cores sit from the group core
    synonym_spread: float = 0.3  # how far synonym vectors sit from the cluster core
    num_scenes: int = 1          # scenes partition the vocabulary; images stay in one scene
    scene_strength: float = 0.0  # scene component mixed into region/word prototypes
    plausibility_jitter: float = 0.5  # per-context spread of masked probabilities
    context_strength: float = 0.0  # sentence-content component mixed into token features
    context_dims: int = 4        # trailing word-feature dims reserved for sentence content
    zipf_exponent: float = 0.0   # skew of visual-class frequencies across images
    filler_vocab: int = 6        # filler words per scene
    pair_groups: bool = False    # plant one same-group (confusable) region pair per image
    grid_side: int | None = None
    canvas: int = 512
    max_regions: int = DEFAULT_MAX_REGIONS

    def __post_init__(self) -> None:
        for name in ("num_images", "regions_per_image", "vocab_size", "caption_length",
                     "d_r", "d_w", "cluster_size", "filler_vocab", "canvas"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be at least 1")
        if self.alignment_noise < 0:
            raise ShapeError("alignment_noise must be non-negative")
        if not 0.0 <= self.noun_fraction <= 1.0:
            raise ShapeError("noun_fraction must lie in [0, 1]")
        if self.regions_per_image > self.max_regions:
            raise ShapeError("regions_per_image exceeds max_regions")
        if self.num_scenes < 1 or self.scene_strength < 0:
            raise ShapeError("num_scenes must be >= 1 and scene_strength >= 0")


@dataclass
class SynthWorld:
    """Prototypes and vocabulary structure shared by all splits of one seed."""

    words: list[str]
    clusters: list[list[str]]            # synonym clusters
    word_to_cluster: dict[str, int]
    groups: list[list[int]]              # cluster indices per confusion group
    cluster_to_group: dict[int, int]
    cluster_to_scene: dict[int, int]
    scene_clusters: list[list[int]]      # cluster indices per scene
    cluster_protos: np.ndarray           # (n_clusters, d_r), scene component included
    word_vecs: dict[str, np.ndarray]     # (d_w,), scene component included
    context_vecs: dict[str, np.ndarray]  # per-noun sentence-context contributions
    scene_fillers: list[list[str]]
    filler_vecs: dict[str, np.ndarray]

    @property
    def fillers(self) -> list[str]:
        return [w for scene in self.scene_fillers for w in scene]

    def scene_of_word(self, word: str) -> int:
        return self.cluster_to_scene[self.word_to_cluster[word]]


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def build_world(config: SynthConfig) -> SynthWorld:
    rng = substream(config.seed, "world")
    n_clusters = math.ceil(config.vocab_size / config.cluster_size)
    clusters: list[list[str]] = []
    words: list[str] = []
    for c in range(n_clusters):
        members = []
        for k in range(config.cluster_size):
            if len(words) >= config.vocab_size:
                break
            word = f"w{c:02d}{chr(97 + k)}"
            members.append(word)
            words.append(word)
        clusters.append(members)
    word_to_cluster = {w: c for c, members in enumerate(clusters) for w in members}

    n_groups = math.ceil(n_clusters / config.group_size)
    groups = [
        list(range(g * config.group_size, min((g + 1) * config.group_size, n_clusters)))
        for g in range(n_groups)
    ]
    cluster_to_group = {c: g for g, members in enumerate(groups) for c in members}

    # Scenes partition whole groups so synonym/confusion structure never
    # crosses a scene boundary.
    n_scenes = min(config.num_scenes, n_groups)
    cluster_to_scene = {
        c: (g * n_scenes) // n_groups for g, members in enumerate(groups) for c in members
    }
    scene_clusters = [
        [c for c in range(n_clusters) if cluster_to_scene[c] == s] for s in range(n_scenes)
    ]

    scene_vec_r = [config.scene_strength * _unit(rng, config.d_r) for _ in range(n_scenes)]
    scene_vec_w = [config.scene_strength * _unit(rng, config.d_w) for _ in range(n_scenes)]

    # Visual classes are independent prototypes; confusion groups live on
    # the WORD side: group members share a word core, so they are the
    # contextually interchangeable, embedding-similar words a language
    # model would propose for the same slot, while denoting different
    # visual classes. Synonyms (one cluster) additionally share the class.
    cluster_protos = np.zeros((n_clusters, config.d_r))
    for c in range(n_clusters):
        cluster_protos[c] = _unit(rng, config.d_r) + scene_vec_r[cluster_to_scene[c]]

    ctx_dims = min(config.context_dims, max(1, config.d_w // 2))

    def _word_unit() -> np.ndarray:
        # Word identity stays out of the reserved context dims.
        vec = _unit(rng, config.d_w)
        if config.context_strength > 0:
            vec[config.d_w - ctx_dims:] = 0.0
            vec /= np.linalg.norm(vec)
        return vec

    word_vecs: dict[str, np.ndarray] = {}
    group_cores = [_word_unit() for _ in groups]
    for c, members in enumerate(clusters):
        core = group_cores[cluster_to_group[c]] + config.group_spread * _word_unit()
        for word in members:
            vec = core + config.synonym_spread * _word_unit()
            word_vecs[word] = vec / np.linalg.norm(vec) + scene_vec_w[cluster_to_scene[c]]

    # Per-cluster sentence-context contributions, shared by synonyms so a
    # synonym substitution preserves the sentence context exactly. Context
    # lives in the trailing feature dims, word identity in the leading
    # ones, so a query map can separate the two channels.
    cluster_ctx = []
    for _ in range(n_clusters):
        vec = np.zeros(config.d_w)
        vec[config.d_w - ctx_dims:] = _unit(rng, ctx_dims)
        cluster_ctx.append(vec)
    context_vecs = {
        w: cluster_ctx[c] for c, members in enumerate(clusters) for w in members
    }

    scene_fillers = [
        [f"ctx{s}_{i}" for i in range(config.filler_vocab)] for s in range(n_scenes)
    ]
    filler_vecs = {
        w: _word_unit() + scene_vec_w[s]
        for s, members in enumerate(scene_fillers)
        for w in members
    }
    return SynthWorld(
        words=words,
        clusters=clusters,
        word_to_cluster=word_to_cluster,
        groups=groups,
        cluster_to_group=cluster_to_group,
        cluster_to_scene=cluster_to_scene,
        scene_clusters=scene_clusters,
        cluster_protos=cluster_protos,
        word_vecs=word_vecs,
        context_vecs=context_vecs,
        scene_fillers=scene_fillers,
        filler_vecs=filler_vecs,
    )


def _f32(arr: np.ndarray) -> np.ndarray:
    """Round to float32 precision so saved and in-memory data agree exactly."""
    return arr.astype(np.float32).astype(np.float64)


def _grid_boxes(config: SynthConfig, rng: np.random.Generator, m: int) -> np.ndarray:
    side = config.grid_side or math.ceil(math.sqrt(m))
    if m > side * side:
        raise ShapeError(f"{m} regions exceed the {side}x{side} grid capacity")
    cell = config.canvas // side
    margin = max(1, cell // 16)
    picks = rng.permutation(side * side)[:m]
    boxes = np.zeros((m, 4))
    for i, cell_idx in enumerate(picks):
        row, col = divmod(int(cell_idx), side)
        boxes[i] = (
            col * cell + margin,
            row * cell + margin,
            (col + 1) * cell - margin,
            (row + 1) * cell - margin,
        )
    return boxes


def _sample_image_clusters(
    world: SynthWorld, config: SynthConfig, rng: np.random.Generator
) -> tuple[int, list[int]]:
    """Pick the image's scene and the distinct visual classes it shows."""
    m = config.regions_per_image
    scene = int(rng.integers(len(world.scene_clusters)))
    pool = world.scene_clusters[scene]
    if config.pair_groups:
        # One visually-confusable pair (two classes of the same group) plus
        # m-2 classes from distinct other groups. Keeps most substitution
        # negatives truly absent from the image while still planting
        # within-image confusion for pointing to measure.
        by_group: dict[int, list[int]] = {}
        for c in pool:
            by_group.setdefault(world.cluster_to_group[c], []).append(c)
        eligible = [g for g, cs in by_group.items() if len(cs) >= 2]
        if not eligible or len(by_group) < m - 1:
            raise ShapeError("pair_groups needs a multi-cluster group and >= m-1 groups")
        pair_group = eligible[int(rng.integers(len(eligible)))]
        two = rng.choice(len(by_group[pair_group]), size=2, replace=False)
        picked = [by_group[pair_group][t] for t in two]
        other_groups = [g for g in by_group if g != pair_group]
        rest = rng.choice(len(other_groups), size=m - 2, replace=False)
        for gi in rest:
            members = by_group[other_groups[gi]]
            picked.append(members[int(rng.integers(len(members)))])
        return scene, picked
    if m > len(pool):
        raise ShapeError(f"{m} regions need at least {m} clusters in the scene, have {len(pool)}")
    weights = None
    if config.zipf_exponent > 0:
        ranks = np.arange(1, len(pool) + 1, dtype=np.float64)
        weights = ranks ** (-config.zipf_exponent)
        weights /= weights.sum()
    picks = rng.choice(len(pool), size=m, replace=False, p=weights)
    return scene, [pool[int(i)] for i in picks]


def synth_generate(
    config: SynthConfig,
) -> tuple[Dataset, dict[tuple[str, int], int], TableLm]:
    """Generate one split plus its alignment oracle and table language model.

    The oracle maps (image_id, token index) to the planted region index for
    every noun token. Identical configs produce bit-identical output.
    """
    world = build_world(config)
    rng = substream(config.seed, "images", config.split)
    noise = config.alignment_noise

    examples: list[GroundingExample] = []
    oracle: dict[tuple[str, int], int] = {}
    masked_table: dict[str, dict[str, float]] = {}
    conditioned_table: dict[str, dict[str, float]] = {}

    for idx in range(config.num_images):
        image_id = f"{config.split}-{idx:05d}"
        m = config.regions_per_image
        scene, region_clusters = _sample_image_clusters(world, config, rng)
        boxes = _grid_boxes(config, rng, m)
        feats = np.stack(
            [
                world.cluster_protos[c] + noise * rng.standard_normal(config.d_r)
                for c in region_clusters
            ]
        )
        regions = RegionSet(image_id=image_id, boxes=boxes, features=_f32(feats))

        n = config.caption_length
        n_nouns = min(m, max(1, round(n * config.noun_fraction)))
        noun_positions = sorted(rng.permutation(n)[:n_nouns].tolist())
        noun_regions = rng.choice(m, size=n_nouns, replace=False)

        tokens: list[str] = []
        pos_mask: list[str] = []
        word_feats = np.zeros((n, config.d_w))
        noun_iter = iter(zip(noun_positions, noun_regions))
        next_noun = next(noun_iter, None)
        phrases: list[Phrase] = []
        for j in range(n):
            if next_noun is not None and j == next_noun[0]:
                region_idx = int(next_noun[1])
                cluster = region_clusters[region_idx]
                word = world.clusters[cluster][
                    int(rng.integers(len(world.clusters[cluster])))
                ]
                tokens.append(word)
                pos_mask.append("noun")
                word_feats[j] = world.word_vecs[word] + noise * rng.standard_normal(config.d_w)
                phrases.append(Phrase(span=(j, j + 1), boxes=boxes[region_idx]))
                oracle[(image_id, j)] = region_idx
                next_noun = next(noun_iter, None)
            else:
                pool = world.scene_fillers[scene]
                word = pool[int(rng.integers(len(pool)))]
                tokens.append(word)
                pos_mask.append("other")
                word_feats[j] = world.filler_vecs[word] + noise * rng.standard_normal(config.d_w)

        word_feats = word_feats + sentence_context_vector(
            tokens, world.context_vecs, config.context_strength
        )
        caption = CaptionTokens(tokens=tokens, features=_f32(word_feats), pos_mask=pos_mask)
        examples.append(
            GroundingExample(
                image_id=image_id, regions=regions, caption=caption, phrases=phrases
            )
        )

        for j in caption.noun_indices:
            word = tokens[j]
            ctx_sig = context_signature(tokens, j)
            mentioned = {tokens[i] for i in caption.noun_indices if i != j}
            masked_table.setdefault(
                ctx_sig,
                _masked_distribution(world, word, ctx_sig, config.plausibility_jitter),
            )
            conditioned_table.setdefault(
                caption_signature(tokens, j),
                _conditioned_distribution(world, word, mentioned),
            )

    dataset = Dataset(
        name="synth",
        split=config.split,
        d_r=config.d_r,
        d_w=config.d_w,
        examples=examples,
    )
    embeddings = dict(world.word_vecs)
    embeddings.update(world.filler_vecs)
    lm = TableLm(
        vocab=list(world.words),
        embeddings=embeddings,
        masked=masked_table,
        conditioned=conditioned_table,
        embed_noise=config.alignment_noise,
        context_vectors=world.context_vecs if config.context_strength > 0 else None,
        context_strength=config.context_strength,
    )
    return dataset, oracle, lm


def _plausible_words(world: SynthWorld, word: str) -> set[str]:
    """Contextually plausible fill-ins: the word's scene, or its confusion
    group when the world has a single scene."""
    cluster = world.word_to_cluster[word]
    if len(world.scene_clusters) > 1:
        scene = world.cluster_to_scene[cluster]
        return {w for c in world.scene_clusters[scene] for w in world.clusters[c]}
    group = world.cluster_to_group[cluster]
    return {w for c in world.groups[group] for w in world.clusters[c]}


def _context_jitter(sig: str, word: str) -> float:
    """Deterministic pseudo-random factor in [-1, 1] per (context, word)."""
    digest = hashlib.sha256(f"{sig}{word}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2**63 - 1.0


def _masked_distribution(world: SynthWorld, word: str, sig: str, jitter: float) -> dict[str, float]:
    plausible = _plausible_words(world, word)
    others = [w for w in world.words if w not in plausible]
    dist: dict[str, float] = {w: P_PLAUSIBLE / len(plausible) for w in plausible}
    for w in others:
        dist[w] = P_OTHER / len(others)
    if jitter > 0:
        for w in dist:
            dist[w] *= math.exp(jitter * _context_jitter(sig, w))
    total = sum(dist.values())
    return {w: p / total for w, p in dist.items()}


def _conditioned_distribution(
    world: SynthWorld, word: str, mentioned: set[str] = frozenset()
) -> dict[str, float]:
    cluster = world.word_to_cluster[word]
    synonyms = [w for w in world.clusters[cluster] if w != word]
    copy_bias = {
        w
        for m in mentioned
        if m in world.word_to_cluster
        for w in world.clusters[world.word_to_cluster[m]]
    } - {word} - set(synonyms)
    plausible = _plausible_words(world, word)
    plausible_non_cluster = [
        w for w in plausible
        if world.word_to_cluster[w] != cluster and w not in copy_bias
    ]
    others = [
        w for w in world.words if w not in plausible and w not in copy_bias
    ]
    dist: dict[str, float] = {word: Q_ORIGINAL}
    for w in synonyms:
        dist[w] = Q_SYNONYM / len(synonyms)
    for w in copy_bias:
        dist[w] = Q_MENTIONED / len(copy_bias)
    for w in plausible_non_cluster:
        dist[w] = Q_PLAUSIBLE / len(plausible_non_cluster)
    for w in others:
        dist[w] = Q_OTHER / len(others)
    total = sum(dist.values())
    return {w: p / total for w, p in dist.items()}


def nearest_prototype_accuracy(
    dataset: Dataset, world: SynthWorld, oracle: dict[tuple[str, int], int]
) -> float:
    """Brute-force alignment recovery from raw features against the oracle.

    Classifies each noun token's feature to its nearest word vector, each
    region to its nearest cluster prototype, and picks the best-matching
    region of that cluster. Requires no trained model: it calibrates how
    recoverable the planted correspondence is at the configured noise.
    """
    word_list = list(world.word_vecs)
    word_mat = np.stack([world.word_vecs[w] for w in word_list])
    hits = total = 0
    for ex in dataset.examples:
        region_dist = np.linalg.norm(
            ex.regions.features[:, None, :] - world.cluster_protos[None, :, :], axis=2
        )
        region_cluster = region_dist.argmin(axis=1)
        for j in ex.caption.noun_indices:
            feat = ex.caption.features[j]
            word = word_list[int(np.linalg.norm(word_mat - feat, axis=1).argmin())]
            cluster = world.word_to_cluster[word]
            members = np.nonzero(region_cluster == cluster)[0]
            if members.size == 0:
                predicted = int(region_dist[:, cluster].argmin())
            else:
                predicted = int(members[region_dist[members, cluster].argmin()])
            hits += predicted == oracle[(ex.image_id, j)]
            total += 1
    return hits / total if total else 0.0


def save_oracle(path: str | Path, oracle: dict[tuple[str, int], int]) -> None:
    records = [
        {"image_id": image_id, "token_index": token_idx, "region_index": region_idx}
        for (image_id, token_idx), region_idx in oracle.items()
    ]
    Path(path).write_text(json.dumps(records, indent=0), encoding="utf-8")


def load_oracle(path: str | Path) -> dict[tuple[str, int], int]:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    return {(r["image_id"], r["token_index"]): r["region_index"] for r in records}
