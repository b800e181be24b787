"""Compositional normal/abnormal prompt ensemble and class text features.

Texts are built by substituting the object name into state-level phrases
("flawless [o]") and the resulting state into template-level sentences
("a photo of a [c]."). The two class feature vectors are the normalized
means of the per-class text embeddings. A deterministic hash-seeded toy
embedder stands in for a real text encoder at desk scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .core_math import l2_normalize

FALLBACK_DESCRIPTION = (
    "This is a photo of a {category} for anomaly detection, which should be "
    "without any damage, flaw, defect, scratch, hole or broken part."
)
DEFAULT_QUESTION = "Is there any anomaly in the image?"


class DegenerateTextError(ValueError):
    """Class embeddings averaged to the zero vector."""


@dataclass(frozen=True)
class PromptEnsemble:
    object_name: str
    normal_texts: tuple[str, ...]
    abnormal_texts: tuple[str, ...]


@dataclass(frozen=True)
class TextFeaturePair:
    """Unit-norm feature vectors for the normal and abnormal text classes."""

    normal_vec: np.ndarray
    abnormal_vec: np.ndarray


@dataclass(frozen=True)
class CategoryDescription:
    category: str
    description: str


@lru_cache(maxsize=1)
def _load_prompt_data() -> tuple[dict, list, dict]:
    pkg = resources.files("anomkit.prompts")
    states = json.loads(pkg.joinpath("states.json").read_text(encoding="utf-8"))
    templates = json.loads(pkg.joinpath("templates.json").read_text(encoding="utf-8"))
    descriptions: dict[str, str] = {}
    for name in ("descriptions_mvtec.json", "descriptions_visa.json"):
        descriptions.update(json.loads(pkg.joinpath(name).read_text(encoding="utf-8")))
    return states, templates, descriptions


def compose_ensemble(object_name: str) -> PromptEnsemble:
    """Expand the state x template cross product for one object name.

    An empty name falls back to the generic term "object". Yields
    7 x 22 = 154 normal and 5 x 22 = 110 abnormal texts.
    """
    states, templates, _ = _load_prompt_data()
    name = object_name.strip() if object_name else ""
    if not name:
        name = "object"

    def expand(state_texts):
        out = []
        for state in state_texts:
            filled = state.replace("[o]", name)
            out.extend(template.replace("[c]", filled) for template in templates)
        return tuple(out)

    return PromptEnsemble(
        object_name=name,
        normal_texts=expand(states["normal"]),
        abnormal_texts=expand(states["abnormal"]),
    )


def build_text_features(normal_embeds, abnormal_embeds) -> TextFeaturePair:
    """Average each class's embeddings and normalize to unit length."""

    def reduce(embeds, label: str) -> np.ndarray:
        arr = np.asarray(embeds, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError(f"{label} embeddings must be a non-empty list of vectors")
        mean = arr.mean(axis=0)
        vec, degenerate = l2_normalize(mean, return_degenerate=True)
        if degenerate:
            raise DegenerateTextError(f"{label} embeddings average to the zero vector")
        return vec

    normal = reduce(normal_embeds, "normal")
    abnormal = reduce(abnormal_embeds, "abnormal")
    if normal.shape != abnormal.shape:
        raise ValueError("normal and abnormal embeddings must share a dimension")
    return TextFeaturePair(normal_vec=normal, abnormal_vec=abnormal)


def toy_text_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-embedding: hash-seeded unit Gaussian vector.

    The (text, seed) pair is hashed with blake2b, the 64-bit digest seeds a
    PCG generator, and the sampled standard normals are L2-normalized, so
    identical inputs give identical vectors across processes.
    """
    if dim < 2:
        raise ValueError("embedding dimension must be >= 2")
    digest = hashlib.blake2b(
        f"{seed}\x1f{text}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return l2_normalize(rng.standard_normal(dim))


def ensemble_text_features(object_name: str, dim: int, seed: int = 0) -> TextFeaturePair:
    """Toy-embed the full ensemble for one object and reduce per class."""
    ensemble = compose_ensemble(object_name)
    normal = [toy_text_embed(t, dim, seed) for t in ensemble.normal_texts]
    abnormal = [toy_text_embed(t, dim, seed) for t in ensemble.abnormal_texts]
    return build_text_features(normal, abnormal)


def _canonical_category(category: str) -> str:
    return category.strip().lower().replace(" ", "_").replace("-", "_")


def description_for(category: str) -> CategoryDescription:
    """Look up the shipped per-category description, or build the fallback."""
    _, _, descriptions = _load_prompt_data()
    key = _canonical_category(category or "object")
    text = descriptions.get(key)
    if text is None:
        text = FALLBACK_DESCRIPTION.format(category=category if category else "object")
    return CategoryDescription(category=category, description=text)


def known_categories() -> tuple[str, ...]:
    """Names with shipped descriptions (15 MVTec-AD plus 12 VisA)."""
    _, _, descriptions = _load_prompt_data()
    return tuple(sorted(descriptions))
