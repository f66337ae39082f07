"""Clean, cluster, and score crowdsourced labels for cluster maps.

Raw labels are free text from game players. The pipeline lowercases and
strips them, removes guessed-class words and stop-words, embeds the cleaned
texts, clusters them per guessed class with complete linkage on cosine
distance, picks a representative word per group, unifies plural lemmas, and
scores each group by contributor count minus a hint penalty. Maps sharing a
top label within a layer are finally merged.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from layerlens.blobs import stable_sum
from layerlens.clustering import cut, linkage, silhouette_values
from layerlens.embeddings import EmbeddingProvider
from layerlens.errors import ValidationError
from layerlens.saliency import ClusterMap
from layerlens.stopwords import STOPWORDS

HINT_PENALTY = 0.1
WRONG_ONLY_FACTOR = 0.25
MAX_LABEL_GROUPS = 10

_PUNCT = re.compile(r"[^\w\s]")
_SPACES = re.compile(r"\s+")


@dataclass
class LabelRecord:
    """One raw label from one play of one cluster map."""

    player: str
    cluster_map: str
    guessed_class: str | None
    true_class: str
    correct: bool
    hints_used: int
    text: str
    trusted: bool = True
    cleaned: str = ""

    def __post_init__(self):
        if not 0 <= self.hints_used <= 5:
            raise ValidationError(f"hints_used must lie in [0, 5], got {self.hints_used}")


@dataclass
class LabelGroup:
    """A cluster of semantically close labels for one cluster map."""

    members: list[str]
    representative: str
    member_records: list[int] = field(default_factory=list)
    score: float = 0.0
    correct_count: int = 0
    wrong_count: int = 0
    hints_sum: int = 0
    clamped: bool = False
    fallback_representative: bool = False


# Hook for deployments that translate labels before analysis (the guessed
# class is available as context). The default passes text through unchanged.
TranslateHook = Callable[[str, "str | None"], str]


def identity_translation(text: str, guessed_class: str | None = None) -> str:
    return text


def normalize_text(text: str) -> str:
    """Lowercase, drop apostrophes, punctuation to spaces, collapse runs."""
    text = text.lower().strip().replace("'", "").replace("’", "")
    text = _PUNCT.sub(" ", text)
    return _SPACES.sub(" ", text).strip()


def clean_label(text: str, guessed_class: str | None) -> str:
    """Normalize a label and drop guessed-class words and stop-words."""
    class_words = set(normalize_text(guessed_class).split()) if guessed_class else set()
    kept = [
        tok
        for tok in normalize_text(text).split()
        if tok not in class_words and tok not in STOPWORDS
    ]
    return " ".join(kept)


def preprocess(
    records: list[LabelRecord],
    class_vocabulary: list[str] | None = None,
    translate: TranslateHook = identity_translation,
) -> list[LabelRecord]:
    """Clean every record's text; records that clean to nothing are dropped."""
    out = []
    for record in records:
        text = translate(record.text, record.guessed_class)
        cleaned = clean_label(text, record.guessed_class)
        if cleaned:
            out.append(replace(record, cleaned=cleaned))
    return out


def embed(provider: EmbeddingProvider, labels: list[str]) -> np.ndarray:
    """One unit vector per label text."""
    if not labels:
        raise ValidationError("no labels to embed")
    vectors = provider.embed(labels)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValidationError("embedding provider returned non-unit vectors")
    return vectors


def _representative(
    member_texts: list[str], member_vectors: np.ndarray, provider: EmbeddingProvider
) -> tuple[str, bool]:
    """The non-stop-word whose embedding is closest (mean cosine) to the group."""
    words: list[str] = []
    for text in member_texts:
        words.extend(text.split())
    candidates = sorted({w for w in words if w not in STOPWORDS})
    if not candidates:
        # every word is a stop-word; fall back to the most frequent raw token
        counts: dict[str, int] = {}
        for w in words:
            counts[w] = counts.get(w, 0) + 1
        top = sorted(counts, key=lambda w: (-counts[w], w))[0]
        return top, True
    word_vectors = provider.embed(candidates)
    mean_cos = word_vectors @ member_vectors.T
    scores = mean_cos.mean(axis=1)
    freq = {w: words.count(w) for w in candidates}
    ranked = sorted(
        range(len(candidates)),
        key=lambda i: (-scores[i], -freq[candidates[i]], candidates[i]),
    )
    return candidates[ranked[0]], False


def cluster_labels(
    vectors: np.ndarray, texts: list[str], provider: EmbeddingProvider
) -> list[LabelGroup]:
    """Group labels by cosine similarity with complete linkage.

    Duplicate texts collapse to a single point before clustering; the group
    count is chosen by average silhouette over 1..min(unique, 10), where a
    single group scores 0 and ties prefer fewer groups. With fewer than 3
    labels there is one group per distinct text.
    """
    n = len(texts)
    if n == 0:
        raise ValidationError("no labels to cluster")
    if vectors.shape[0] != n:
        raise ValidationError("one vector per text required")

    unique_texts = sorted(set(texts))
    index_of = {t: i for i, t in enumerate(unique_texts)}
    occurrences: dict[str, list[int]] = {t: [] for t in unique_texts}
    for i, t in enumerate(texts):
        occurrences[t].append(i)

    def build(groups_of_unique: list[list[int]]) -> list[LabelGroup]:
        groups = []
        for unique_ids in groups_of_unique:
            member_ids: list[int] = []
            for u in unique_ids:
                member_ids.extend(occurrences[unique_texts[u]])
            member_ids.sort()
            member_texts = [texts[i] for i in member_ids]
            rep, fallback = _representative(member_texts, vectors[member_ids], provider)
            groups.append(
                LabelGroup(
                    members=member_texts,
                    representative=rep,
                    member_records=member_ids,
                    fallback_representative=fallback,
                )
            )
        groups.sort(key=lambda g: (-len(g.members), g.representative))
        return groups

    if n < 3 or len(unique_texts) == 1:
        return build([[u] for u in range(len(unique_texts))])

    uvecs = np.stack([vectors[occurrences[t][0]] for t in unique_texts])
    m = len(unique_texts)
    dist = np.clip(1.0 - uvecs @ uvecs.T, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    merges = linkage(dist, "complete")
    best_k, best_score = 1, 0.0  # one group is the baseline
    for k in range(2, min(m, MAX_LABEL_GROUPS) + 1):
        labels_k = cut(merges, m, k)
        score = float(silhouette_values(dist, labels_k).mean())
        if score > best_score:
            best_k, best_score = k, score
    labels = cut(merges, m, best_k) if best_k > 1 else np.zeros(m, dtype=int)
    return build([[u for u in range(m) if labels[u] == c] for c in range(best_k)])


# ---------------------------------------------------------------------------
# lemma unification
# ---------------------------------------------------------------------------


def stem(word: str) -> str:
    """Rule-based English stem for plural unification.

    Rules, in order: -ies -> -y (len > 4); -es dropped after s/x/z/ch/sh/o
    (len > 3); trailing -s dropped unless the word ends in -ss/-us/-is
    (len > 3). Anything else is returned unchanged.
    """
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 3 and word.endswith("es"):
        if word[-3] in "sxz" or word.endswith(("ches", "shes", "oes")):
            return word[:-2]
    if len(word) > 3 and word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


def unify_lemmas(groups: list[LabelGroup]) -> list[LabelGroup]:
    """Merge groups whose representatives share a stem.

    The merged representative is the most frequent surface form among the
    merged groups' member texts (ties lexicographic).
    """
    by_stem: dict[str, list[LabelGroup]] = {}
    order: list[str] = []
    for group in groups:
        key = stem(group.representative)
        if key not in by_stem:
            order.append(key)
        by_stem.setdefault(key, []).append(group)
    out = []
    for key in order:
        bucket = by_stem[key]
        if len(bucket) == 1:
            out.append(bucket[0])
            continue
        members: list[str] = []
        member_records: list[int] = []
        for g in bucket:
            members.extend(g.members)
            member_records.extend(g.member_records)
        surfaces = sorted({g.representative for g in bucket})
        word_counts = {
            s: sum(text.split().count(s) for text in members) for s in surfaces
        }
        representative = sorted(surfaces, key=lambda s: (-word_counts[s], s))[0]
        out.append(
            LabelGroup(
                members=members,
                representative=representative,
                member_records=sorted(member_records),
                fallback_representative=any(g.fallback_representative for g in bucket),
            )
        )
    return out


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def score(groups: list[LabelGroup], records: list[LabelRecord]) -> list[LabelGroup]:
    """Score groups: contributor count minus 0.1 per hint, quartered when
    no contributor guessed the class correctly, clamped at zero.

    Only trusted records participate; ``member_records`` index into
    ``records``.
    """
    out = []
    for group in groups:
        contributors = [records[i] for i in group.member_records if records[i].trusted]
        count = len(contributors)
        hints_sum = sum(r.hints_used for r in contributors)
        correct_count = sum(1 for r in contributors if r.correct)
        raw = count - HINT_PENALTY * hints_sum
        value = raw if correct_count > 0 else raw * WRONG_ONLY_FACTOR
        clamped = value < 0
        out.append(
            replace(
                group,
                score=max(0.0, value),
                correct_count=correct_count,
                wrong_count=count - correct_count,
                hints_sum=hints_sum,
                clamped=clamped,
            )
        )
    out.sort(key=lambda g: (-g.score, g.representative))
    return out


# ---------------------------------------------------------------------------
# same-top-label merge (layer-wise)
# ---------------------------------------------------------------------------


def top_label(groups: list[LabelGroup]) -> str:
    if not groups:
        raise ValidationError("cluster map has no label groups")
    return sorted(groups, key=lambda g: (-g.score, g.representative))[0].representative


def merge_same_top_label(
    layer_maps: list[tuple[ClusterMap, list[LabelGroup]]]
) -> list[tuple[ClusterMap, list[LabelGroup]]]:
    """Merge cluster maps of one layer that share the same top label.

    Maps merge by weighted average (weights summed); each label's merged
    score is the map-weight average of its per-map scores, scoring 0 where
    absent. The result is re-sorted by weight.
    """
    if not layer_maps:
        return []
    layers = {cmap.layer for cmap, _ in layer_maps}
    if len(layers) > 1:
        raise ValidationError(f"maps from mixed layers: {sorted(layers)}")
    buckets: dict[str, list[tuple[ClusterMap, list[LabelGroup]]]] = {}
    order: list[str] = []
    for cmap, groups in layer_maps:
        key = top_label(groups)
        if key not in buckets:
            order.append(key)
        buckets.setdefault(key, []).append((cmap, groups))

    merged: list[tuple[ClusterMap, list[LabelGroup]]] = []
    for key in order:
        bucket = buckets[key]
        if len(bucket) == 1:
            merged.append(bucket[0])
            continue
        bucket = sorted(bucket, key=lambda it: it[0].id)
        weights = [cmap.weight for cmap, _ in bucket]
        total = stable_sum(np.asarray(weights))
        acc = np.zeros_like(bucket[0][0].map)
        members: list[int] = []
        for cmap, _ in bucket:
            acc = acc + cmap.weight * cmap.map
            members.extend(cmap.members)
        new_map = ClusterMap(
            id="+".join(cmap.id for cmap, _ in bucket),
            layer=bucket[0][0].layer,
            map=acc / total,
            weight=total,
            members=sorted(set(members)),
        )
        representatives: list[str] = []
        for _, groups in bucket:
            for g in groups:
                if g.representative not in representatives:
                    representatives.append(g.representative)
        new_groups = []
        for rep in representatives:
            num = 0.0
            members_all: list[str] = []
            correct_count = wrong_count = hints_sum = 0
            for cmap, groups in bucket:
                match = next((g for g in groups if g.representative == rep), None)
                if match is not None:
                    num += cmap.weight * match.score
                    members_all.extend(match.members)
                    correct_count += match.correct_count
                    wrong_count += match.wrong_count
                    hints_sum += match.hints_sum
            new_groups.append(
                LabelGroup(
                    members=members_all,
                    representative=rep,
                    score=num / total,
                    correct_count=correct_count,
                    wrong_count=wrong_count,
                    hints_sum=hints_sum,
                )
            )
        new_groups.sort(key=lambda g: (-g.score, g.representative))
        merged.append((new_map, new_groups))
    merged.sort(key=lambda it: (-it[0].weight, it[0].id))
    return merged


# ---------------------------------------------------------------------------
# files: crowd-service export in, scored groups out
# ---------------------------------------------------------------------------


def load_label_export(path: str | Path) -> list[LabelRecord]:
    """Read the game service's line-delimited label export."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing label export: {path}")
    records = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as err:
            raise ValidationError(f"{path.name}:{line_no}: bad JSON: {err}") from err
        for text in doc["labels"]:
            records.append(
                LabelRecord(
                    player=doc["user"],
                    cluster_map=doc["cluster_map_id"],
                    guessed_class=doc.get("guessed_class"),
                    true_class=doc["true_class"],
                    correct=bool(doc["correct"]),
                    hints_used=int(doc["hints_used"]),
                    text=text,
                    trusted=bool(doc["trusted"]),
                )
            )
    return records


def analyze_records(
    records: list[LabelRecord],
    provider: EmbeddingProvider,
    translate: TranslateHook = identity_translation,
) -> dict[str, list[LabelGroup]]:
    """Full pipeline per cluster map: clean, cluster per guessed class,
    unify lemmas, score."""
    cleaned = preprocess(records, translate=translate)
    by_map: dict[str, list[LabelRecord]] = {}
    for record in cleaned:
        by_map.setdefault(record.cluster_map, []).append(record)
    out: dict[str, list[LabelGroup]] = {}
    for map_id in sorted(by_map):
        recs = by_map[map_id]
        partitions: dict[str, list[int]] = {}
        for i, r in enumerate(recs):
            partitions.setdefault(r.guessed_class or "", []).append(i)
        groups: list[LabelGroup] = []
        for guessed in sorted(partitions):
            part = partitions[guessed]
            texts = [recs[i].cleaned for i in part]
            vectors = embed(provider, texts)
            for group in cluster_labels(vectors, texts, provider):
                group.member_records = sorted(part[i] for i in group.member_records)
                groups.append(group)
        groups = unify_lemmas(groups)
        out[map_id] = score(groups, recs)
    return out


def save_groups(
    path: str | Path, cluster_map: str, groups: list[LabelGroup], config_hash: str = ""
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": 1,
        "cluster_map": cluster_map,
        "config_hash": config_hash,
        "groups": [
            {
                "texts": g.members,
                "representative": g.representative,
                "score": g.score,
                "correct_count": g.correct_count,
                "wrong_count": g.wrong_count,
                "hints_sum": g.hints_sum,
                "clamped": g.clamped,
                "fallback_representative": g.fallback_representative,
            }
            for g in groups
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_groups(path: str | Path) -> tuple[str, list[LabelGroup]]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing label groups file: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != 1:
        raise ValidationError(f"unsupported label group version: {doc.get('version')!r}")
    groups = [
        LabelGroup(
            members=list(g["texts"]),
            representative=g["representative"],
            score=float(g["score"]),
            correct_count=int(g["correct_count"]),
            wrong_count=int(g["wrong_count"]),
            hints_sum=int(g["hints_sum"]),
            clamped=bool(g["clamped"]),
            fallback_representative=bool(g["fallback_representative"]),
        )
        for g in doc["groups"]
    ]
    return doc["cluster_map"], groups
