"""Small classifiers and the two synthetic teachers.

* :class:`ClassifierParams` -- tanh MLP encoder with a linear bottleneck and
  a linear head; used for the source, target and proxy models.
* :class:`PrototypeTeacherParams` -- frozen encoder on the global view,
  frozen class prototypes and a trainable per-class context offset.
* :class:`CaptionTeacherSpec` -- frozen embedding of the local view compared
  against class-name embeddings by cosine similarity.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from . import container
from .autograd import ShapeError, Tensor

CLASSIFIER_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True)
class ParamBundle:
    """Named arrays under a tag; ``trainable`` lists the names that may learn."""

    tag: str
    arrays: Mapping[str, np.ndarray]
    trainable: tuple[str, ...]

    def __post_init__(self):
        frozen = {}
        for k, v in self.arrays.items():
            arr = np.array(v, dtype=np.float64)
            arr.setflags(write=False)
            frozen[k] = arr
        object.__setattr__(self, "arrays", frozen)

    def key(self, name: str) -> str:
        return f"{self.tag}.{name}"

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad and k in self.trainable, name=self.key(k))
                for k, v in self.arrays.items()}

    def named_trainable(self) -> dict[str, np.ndarray]:
        return {self.key(k): self.arrays[k] for k in self.trainable}

    def with_updates(self, updates: Mapping[str, np.ndarray]):
        arrays = dict(self.arrays)
        for full, arr in updates.items():
            tag, _, name = full.partition(".")
            if tag != self.tag:
                continue
            if name not in self.trainable:
                raise KeyError(f"{full} is frozen")
            arrays[name] = arr
        return type(self)(**{**self._fields(), "arrays": arrays})

    def retag(self, tag: str):
        return type(self)(**{**self._fields(), "tag": tag})

    def _fields(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def digest(self, names=None) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays if names is None else names):
            h.update(k.encode())
            h.update(self.arrays[k].tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamBundle") -> bool:
        return (self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


@dataclass(frozen=True)
class ClassifierParams(ParamBundle):
    trainable: tuple[str, ...] = CLASSIFIER_KEYS

    @classmethod
    def init(cls, tag: str, input_dim: int, hidden_dim: int, bottleneck_dim: int, K: int,
             rng: np.random.Generator) -> "ClassifierParams":
        def glorot(a, b):
            return rng.normal(scale=np.sqrt(2.0 / (a + b)), size=(a, b))

        return cls(tag, {
            "W1": glorot(input_dim, hidden_dim), "b1": np.zeros(hidden_dim),
            "W2": glorot(hidden_dim, bottleneck_dim), "b2": np.zeros(bottleneck_dim),
            "W3": glorot(bottleneck_dim, K), "b3": np.zeros(K),
        })

    @property
    def input_dim(self) -> int:
        return self.arrays["W1"].shape[0]

    @property
    def K(self) -> int:
        return self.arrays["W3"].shape[1]


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    out = ag.matmul(x, W)
    return out + ag.broadcast_to(ag.reshape(b, (1, b.shape[0])), out.shape)


def logits(params: ClassifierParams, batch, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    p = leaves if leaves is not None else params.leaves(requires_grad=False)
    x = ag.as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError("predict", x.shape, (params.input_dim,))
    h = ag.tanh(_affine(x, p["W1"], p["b1"]))
    z = _affine(h, p["W2"], p["b2"])
    return _affine(z, p["W3"], p["b3"])


def predict(params: ClassifierParams, batch, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Class probabilities; pass ``leaves`` from ``params.leaves()`` to differentiate."""
    return ag.softmax(logits(params, batch, leaves), axis=-1)


def predict_numpy(params: ClassifierParams, batch: np.ndarray) -> np.ndarray:
    a = params.arrays
    h = np.tanh(batch @ a["W1"] + a["b1"])
    z = (h @ a["W2"] + a["b2"]) @ a["W3"] + a["b3"]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------- prototype teacher

@dataclass(frozen=True)
class PrototypeTeacherParams(ParamBundle):
    """``encoder``: view_dim x embed_dim with ``encoder_bias``, ``prototypes``:
    K x embed_dim unit rows, ``context``: K x embed_dim offsets (the only
    trainable tensor)."""

    trainable: tuple[str, ...] = ("context",)
    tau: float = 10.0

    @property
    def K(self) -> int:
        return self.arrays["prototypes"].shape[0]

    def embed(self, view: np.ndarray) -> np.ndarray:
        E = self.arrays["encoder"]
        if view.ndim != 2 or view.shape[1] != E.shape[0]:
            raise ShapeError("prototype teacher", view.shape, E.shape)
        emb = view @ E + self.arrays["encoder_bias"]
        return emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)


def prototype_predict(params: PrototypeTeacherParams, teacher_view,
                      leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    p = leaves if leaves is not None else params.leaves(requires_grad=False)
    emb = Tensor(params.embed(np.asarray(teacher_view, dtype=np.float64)))
    protos = ag.normalize_rows(ag.Tensor(params.arrays["prototypes"]) + p["context"])
    return ag.softmax(ag.scale(ag.matmul(emb, ag.transpose(protos)), params.tau), axis=-1)


def make_prototype_teacher(class_means_view: np.ndarray, embed_dim: int, rng: np.random.Generator,
                           prototype_noise: float = 0.0, tau: float = 10.0,
                           tag: str = "prompt") -> PrototypeTeacherParams:
    """Teacher whose prototypes are the (noisy) embedded class means of its view."""
    view_dim = class_means_view.shape[1]
    E = rng.normal(size=(view_dim, embed_dim)) / np.sqrt(embed_dim)
    bias = -class_means_view.mean(axis=0) @ E
    P = class_means_view @ E + bias
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    P = P + prototype_noise * rng.normal(size=P.shape) / np.sqrt(embed_dim)
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    K = P.shape[0]
    return PrototypeTeacherParams(tag, {"encoder": E, "encoder_bias": bias, "prototypes": P,
                                        "context": np.zeros((K, embed_dim))}, tau=tau)


# ------------------------------------------------------------- caption teacher

@dataclass(frozen=True)
class CaptionTeacherSpec:
    embedding_map: np.ndarray
    embedding_bias: np.ndarray
    class_name_embeddings: np.ndarray
    noise: float = 0.0

    @property
    def K(self) -> int:
        return self.class_name_embeddings.shape[0]


def _unit_rows(M: np.ndarray) -> np.ndarray:
    return M / np.maximum(np.linalg.norm(M, axis=1, keepdims=True), 1e-12)


def make_caption_teacher(class_means_view: np.ndarray, embed_dim: int, rng: np.random.Generator,
                         noise: float = 0.0, name_noise: float = 0.0) -> CaptionTeacherSpec:
    M = rng.normal(size=(class_means_view.shape[1], embed_dim)) / np.sqrt(embed_dim)
    bias = -class_means_view.mean(axis=0) @ M
    names = _unit_rows(class_means_view @ M + bias)
    names = _unit_rows(names + name_noise * rng.normal(size=names.shape) / np.sqrt(embed_dim))
    return CaptionTeacherSpec(M, bias, names, noise)


def caption_embed(spec: CaptionTeacherSpec, teacher_view: np.ndarray, seed: int) -> np.ndarray:
    """Unit-norm caption embeddings; the perturbation is fixed by ``seed``."""
    view = np.asarray(teacher_view, dtype=np.float64)
    if view.ndim != 2 or view.shape[1] != spec.embedding_map.shape[0]:
        raise ShapeError("caption_embed", view.shape, spec.embedding_map.shape)
    emb = _unit_rows(view @ spec.embedding_map + spec.embedding_bias)
    if spec.noise > 0:
        rng = np.random.default_rng(seed)
        emb = emb + spec.noise * rng.normal(size=emb.shape) / np.sqrt(emb.shape[1])
    return _unit_rows(emb)


def cosine_pseudo_labels(embeddings: np.ndarray, class_name_embeddings: np.ndarray) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    C = np.asarray(class_name_embeddings, dtype=np.float64)
    if E.shape[1] != C.shape[1]:
        raise ShapeError("cosine_pseudo_labels", E.shape, C.shape)
    en = np.linalg.norm(E, axis=1)
    if np.any(en == 0):
        raise ValueError(f"zero-norm embedding at rows {np.flatnonzero(en == 0).tolist()}")
    cos = (E / en[:, None]) @ (C / np.linalg.norm(C, axis=1)[:, None]).T
    return cos.argmax(axis=1)


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(path, bundles: Mapping[str, ParamBundle]) -> None:
    meta, arrays = {}, {}
    for role, b in bundles.items():
        meta[role] = {"kind": type(b).__name__, "tag": b.tag, "trainable": list(b.trainable),
                      "tau": getattr(b, "tau", None)}
        for k, v in b.arrays.items():
            arrays[f"{role}/{k}"] = v
    container.save(path, b"C", meta, arrays)


def load_checkpoint(path) -> dict[str, ParamBundle]:
    meta, arrays = container.load(path, b"C")
    kinds = {"ClassifierParams": ClassifierParams, "PrototypeTeacherParams": PrototypeTeacherParams}
    out = {}
    for role, info in meta.items():
        cls = kinds.get(info.get("kind"))
        if cls is None:
            raise container.FormatError(f"unknown parameter kind {info.get('kind')!r}")
        own = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.split("/", 1)[0] == role}
        kwargs = {"tag": info["tag"], "arrays": own, "trainable": tuple(info["trainable"])}
        if cls is PrototypeTeacherParams:
            kwargs["tau"] = info["tau"]
        out[role] = cls(**kwargs)
    return out
