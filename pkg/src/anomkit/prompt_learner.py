"""Prompt learner: turns the anomaly map into LLM-ready prompt embeddings.

The output concatenates n1 learnable base embeddings (independent of the
map) with n2 embeddings produced by a small convolutional stack over the
224x224 map: two 4x4 stride-4 convolutions (224 -> 56 -> 14) followed by a
linear head from the 14x14 response to the n2 x C_emb block. Training this
module is out of scope here; parameters are seeded-random and the forward
pass is exported together with the prompt frame as a PromptRecord, the
hand-off boundary to any external LLM runtime.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .features import IMAGE_SIZE
from .text_prompts import DEFAULT_QUESTION, CategoryDescription

CONV_KERNEL = 4
CONV_STRIDE = 4
HEAD_SPATIAL = IMAGE_SIZE // (CONV_STRIDE * CONV_STRIDE)  # 14


@dataclass(frozen=True)
class PromptLearnerParams:
    e_base: np.ndarray  # (n1, C_emb)
    conv1_w: np.ndarray  # (c1, 1, 4, 4)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (c2, c1, 4, 4)
    conv2_b: np.ndarray
    head_w: np.ndarray  # (14*14*c2, n2*C_emb)
    head_b: np.ndarray

    def __post_init__(self) -> None:
        if self.e_base.ndim != 2 or self.e_base.shape[0] < 1:
            raise ValueError("e_base must be (n1, C_emb) with n1 >= 1")
        if self.e_base.shape[1] < 8:
            raise ValueError("embedding dimension must be >= 8")
        if self.head_b.shape[0] % self.e_base.shape[1] != 0:
            raise ValueError("head output must be a whole number of embeddings")

    @property
    def n1(self) -> int:
        return self.e_base.shape[0]

    @property
    def n2(self) -> int:
        return self.head_b.shape[0] // self.embed_dim

    @property
    def embed_dim(self) -> int:
        return self.e_base.shape[1]


@dataclass(frozen=True)
class PromptRecord:
    """Serialized prompt frame with the embeddings carried out-of-band."""

    text: str
    image_embedding: np.ndarray
    prompt_embeddings: np.ndarray


def init_prompt_learner(
    n1: int = 4,
    n2: int = 16,
    embed_dim: int = 4096,
    seed: int = 0,
    conv_channels: tuple[int, int] = (8, 1),
) -> PromptLearnerParams:
    """Seeded random initialization (the learner is forward-only here)."""
    if n1 < 1 or n2 < 1:
        raise ValueError("n1 and n2 must be >= 1")
    c1, c2 = conv_channels
    k2 = CONV_KERNEL * CONV_KERNEL
    head_in = HEAD_SPATIAL * HEAD_SPATIAL * c2

    def draw(tag, shape, scale):
        rng = np.random.default_rng([seed, tag])
        return rng.normal(0.0, scale, size=shape).astype(np.float32)

    return PromptLearnerParams(
        e_base=draw(0, (n1, embed_dim), 0.02),
        conv1_w=draw(1, (c1, 1, CONV_KERNEL, CONV_KERNEL), 1.0 / np.sqrt(k2)),
        conv1_b=np.zeros(c1, dtype=np.float32),
        conv2_w=draw(2, (c2, c1, CONV_KERNEL, CONV_KERNEL), 1.0 / np.sqrt(c1 * k2)),
        conv2_b=np.zeros(c2, dtype=np.float32),
        head_w=draw(3, (head_in, n2 * embed_dim), 1.0 / np.sqrt(head_in)),
        head_b=np.zeros(n2 * embed_dim, dtype=np.float32),
    )


def image_embed(final_feature, weight, bias) -> np.ndarray:
    """Affine map of the image-level feature to the embedding width."""
    f = np.asarray(final_feature, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if f.ndim != 1 or w.ndim != 2 or w.shape[0] != f.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"incompatible shapes: feature {f.shape}, weight {w.shape}, bias {b.shape}"
        )
    return (f @ w + b).astype(np.float32)


def init_image_projection(in_dim: int, embed_dim: int, seed: int = 0):
    rng = np.random.default_rng([seed, 100])
    weight = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, embed_dim)).astype(np.float32)
    return weight, np.zeros(embed_dim, dtype=np.float32)


def _conv4x4_s4(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # Non-overlapping 4x4 stride-4 convolution via block reshape.
    c_in, h, w = x.shape
    ho, wo = h // CONV_STRIDE, w // CONV_STRIDE
    patches = (
        x.reshape(c_in, ho, CONV_KERNEL, wo, CONV_KERNEL)
        .transpose(1, 3, 0, 2, 4)
        .reshape(ho, wo, -1)
    )
    out = patches @ weight.reshape(weight.shape[0], -1).T + bias
    return out.transpose(2, 0, 1)


def prompt_forward(anomaly_map, params: PromptLearnerParams) -> np.ndarray:
    """E_prompt of shape (n1 + n2, C_emb): base rows verbatim, then E_dec."""
    m = np.asarray(anomaly_map, dtype=np.float64)
    if m.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"anomaly map must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {m.shape}")
    h1 = np.maximum(
        _conv4x4_s4(m[None], params.conv1_w.astype(np.float64), params.conv1_b.astype(np.float64)),
        0.0,
    )
    h2 = np.maximum(
        _conv4x4_s4(h1, params.conv2_w.astype(np.float64), params.conv2_b.astype(np.float64)),
        0.0,
    )
    flat = h2.transpose(1, 2, 0).reshape(-1)
    e_dec = (flat @ params.head_w.astype(np.float64) + params.head_b.astype(np.float64)).reshape(
        params.n2, params.embed_dim
    )
    return np.vstack([params.e_base, e_dec.astype(np.float32)])


def assemble_prompt_record(
    e_img: np.ndarray,
    e_prompt: np.ndarray,
    description: CategoryDescription | None = None,
    question: str = DEFAULT_QUESTION,
) -> PromptRecord:
    """Build the prompt frame; the description segment may be omitted."""
    if not question:
        raise ValueError("question must be non-empty")
    desc = description.description if description is not None else ""
    text = f"### Human: <Img><IMG_EMB></Img><PROMPT_EMB>{desc}{question}###Assistant:"
    return PromptRecord(
        text=text,
        image_embedding=np.asarray(e_img, dtype=np.float32),
        prompt_embeddings=np.asarray(e_prompt, dtype=np.float32),
    )


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def record_to_json(record: PromptRecord) -> str:
    payload = {
        "text": record.text,
        "image_embedding": {
            "dim": record.image_embedding.shape[0],
            "data_b64": _b64(record.image_embedding),
        },
        "prompt_embeddings": {
            "rows": record.prompt_embeddings.shape[0],
            "cols": record.prompt_embeddings.shape[1],
            "data_b64": _b64(record.prompt_embeddings),
        },
    }
    return json.dumps(payload, sort_keys=True)


def record_from_json(text: str) -> PromptRecord:
    payload = json.loads(text)
    img = np.frombuffer(
        base64.b64decode(payload["image_embedding"]["data_b64"]), dtype="<f4"
    ).astype(np.float32)
    if img.shape[0] != payload["image_embedding"]["dim"]:
        raise ValueError("image embedding payload does not match its dim field")
    rows = payload["prompt_embeddings"]["rows"]
    cols = payload["prompt_embeddings"]["cols"]
    prompt = np.frombuffer(
        base64.b64decode(payload["prompt_embeddings"]["data_b64"]), dtype="<f4"
    )
    if prompt.shape[0] != rows * cols:
        raise ValueError("prompt embedding payload does not match rows x cols")
    return PromptRecord(
        text=payload["text"],
        image_embedding=img,
        prompt_embeddings=prompt.reshape(rows, cols).astype(np.float32),
    )
