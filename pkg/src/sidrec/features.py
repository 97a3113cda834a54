"""Item feature ingestion: binary matrices, tag hierarchies, popularity."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import InteractionCorpus, normalize_popularity

MAGIC = b"PRSM"
DTYPE_F32 = 1
LEAF_TAG = "<leaf>"


class FeatureError(ValueError):
    """Missing items, malformed files, or dimension mismatches."""


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a 2-D float32 matrix: 16-byte header + row-major little-endian data."""
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise FeatureError("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", DTYPE_F32, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != MAGIC:
            raise FeatureError(f"{path}: bad magic, not a feature matrix file")
        dtype_code, rows, cols = struct.unpack("<III", header[4:])
        if dtype_code != DTYPE_F32:
            raise FeatureError(f"{path}: unsupported dtype code {dtype_code}")
        data = fh.read(rows * cols * 4)
    if len(data) != rows * cols * 4:
        raise FeatureError(f"{path}: truncated matrix payload")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()


def write_index(path: str | Path, ids: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for one in ids:
            fh.write(one + "\n")


def read_index(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]


def write_tags(path: str | Path, tags: dict[str, list[str]]) -> None:
    """Write ``item<TAB>tag1/tag2/.../tagL`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for item, tag_path in tags.items():
            fh.write(f"{item}\t{'/'.join(tag_path)}\n")


def read_tags(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FeatureError(f"{path}:{lineno}: expected item<TAB>tag path")
            out[parts[0]] = parts[1].split("/")
    return out


def normalize_tag_path(tags: list[str], n_levels: int) -> tuple[str, ...]:
    """Pad short paths with the leaf sentinel, truncate long ones."""
    trimmed = list(tags[:n_levels])
    while len(trimmed) < n_levels:
        trimmed.append(LEAF_TAG)
    return tuple(trimmed)


@dataclass
class ItemFeatures:
    e_content: np.ndarray       # (d_content,) float32
    e_collab: np.ndarray        # (d_collab,) float32
    tags: tuple[str, ...]       # exactly n_levels entries
    popularity_raw: int
    popularity: float           # min-max normalized in [0, 1]


@dataclass
class FeatureSet:
    items: dict[str, ItemFeatures]
    tag_embeddings: dict[str, np.ndarray]     # tag string -> (d_content,)
    tag_vocab: list[dict[str, int]]           # per depth: tag string -> class index
    d_content: int
    d_collab: int

    def tag_index(self, item: str) -> tuple[int, ...]:
        feats = self.items[item]
        return tuple(self.tag_vocab[d][feats.tags[d]] for d in range(len(feats.tags)))

    def normalized(self, n_levels: int) -> "FeatureSet":
        """Re-pad/truncate every tag path to ``n_levels`` and rebuild the vocab."""
        paths = {item: normalize_tag_path(list(f.tags), n_levels) for item, f in self.items.items()}
        if all(paths[item] == f.tags for item, f in self.items.items()):
            return self
        items = {
            item: ItemFeatures(
                e_content=f.e_content,
                e_collab=f.e_collab,
                tags=paths[item],
                popularity_raw=f.popularity_raw,
                popularity=f.popularity,
            )
            for item, f in self.items.items()
        }
        embeddings = dict(self.tag_embeddings)
        embeddings.setdefault(LEAF_TAG, np.zeros(self.d_content, dtype=np.float32))
        return FeatureSet(
            items=items,
            tag_embeddings=embeddings,
            tag_vocab=build_tag_vocab(paths, n_levels),
            d_content=self.d_content,
            d_collab=self.d_collab,
        )

    def tag_content(self, item: str) -> np.ndarray:
        """Stacked per-depth tag embeddings, shape (n_levels, d_content)."""
        feats = self.items[item]
        return np.stack([self.tag_embeddings[t] for t in feats.tags])


def _load_keyed_matrix(matrix_path, index_path) -> dict[str, np.ndarray]:
    matrix = read_matrix(matrix_path)
    ids = read_index(index_path)
    if len(ids) != matrix.shape[0]:
        raise FeatureError(
            f"{index_path}: index has {len(ids)} ids but matrix has {matrix.shape[0]} rows"
        )
    return {one: matrix[i] for i, one in enumerate(ids)}


def build_tag_vocab(tag_paths: dict[str, tuple[str, ...]], n_levels: int) -> list[dict[str, int]]:
    vocab: list[dict[str, int]] = []
    for depth in range(n_levels):
        names = sorted({path[depth] for path in tag_paths.values()})
        vocab.append({name: i for i, name in enumerate(names)})
    return vocab


def load_features(
    corpus: InteractionCorpus,
    content_matrix: str | Path,
    content_index: str | Path,
    collab_matrix: str | Path,
    collab_index: str | Path,
    tags_path: str | Path,
    tag_matrix: str | Path,
    tag_index: str | Path,
    n_levels: int,
    d_content: int,
    d_collab: int,
) -> FeatureSet:
    """Assemble per-item features for every catalog item, or fail loudly."""
    content = _load_keyed_matrix(content_matrix, content_index)
    collab = _load_keyed_matrix(collab_matrix, collab_index)
    raw_tags = read_tags(tags_path)
    tag_emb = _load_keyed_matrix(tag_matrix, tag_index)

    for name, table, want in (
        ("content", content, d_content),
        ("collab", collab, d_collab),
        ("tag", tag_emb, d_content),
    ):
        if table:
            got = next(iter(table.values())).shape[0]
            if got != want:
                raise FeatureError(f"{name} matrix has dimension {got}, config expects {want}")

    missing = [
        item for item in corpus.items
        if item not in content or item not in collab or item not in raw_tags
    ]
    if missing:
        shown = ", ".join(missing[:10])
        raise FeatureError(f"{len(missing)} items missing from feature files (first 10: {shown})")

    tag_paths = {item: normalize_tag_path(raw_tags[item], n_levels) for item in corpus.items}
    vocab = build_tag_vocab(tag_paths, n_levels)

    embeddings: dict[str, np.ndarray] = {}
    for path in tag_paths.values():
        for tag in path:
            if tag in embeddings:
                continue
            if tag in tag_emb:
                embeddings[tag] = tag_emb[tag].astype(np.float32)
            elif tag == LEAF_TAG:
                embeddings[tag] = np.zeros(d_content, dtype=np.float32)
            else:
                raise FeatureError(f"tag {tag!r} has no embedding in the tag matrix")

    counts = {item: 0 for item in corpus.items}
    for split in corpus.splits.values():
        for item in split.train:
            counts[item] += 1
    popularity = normalize_popularity(corpus)

    items = {
        item: ItemFeatures(
            e_content=content[item].astype(np.float32),
            e_collab=collab[item].astype(np.float32),
            tags=tag_paths[item],
            popularity_raw=counts[item],
            popularity=popularity[item],
        )
        for item in corpus.items
    }
    return FeatureSet(
        items=items,
        tag_embeddings=embeddings,
        tag_vocab=vocab,
        d_content=d_content,
        d_collab=d_collab,
    )
