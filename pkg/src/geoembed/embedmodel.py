"""The four embedding architectures, their losses, and embedding extraction.

Two encoder sizes (small: 48/16 conv channels, 8-dim embedding; large:
1024/2048 conv channels, 16-dim embedding) combine with two decoder styles:
the full-cuboid reconstruction decoder (mirrored transpose convolutions with
max unpooling) and the center-prediction decoder (fully connected, predicts
the center location's own attribute vector from the surrounding grid).

Reference channel widths assume d=512 input variables on a 16x16 grid; for
other d the convolution widths scale proportionally (floor of 2) while the
fully-connected widths and the embedding dimension stay fixed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .tensornet import (
    Activation,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool2d,
    MaxUnpool2d,
    Network,
    Roll,
    TransposeConv2d,
    Unroll,
)

ARCHITECTURES = ("small_crae", "large_crae", "small_cbow", "large_cbow")

#: Reference widths decoded from the published layer tables (at d=512).
_REFERENCE = {
    "small": {"conv": (48, 16), "fc1": 16, "embedding_dim": 8},
    "large": {"conv": (1024, 2048), "fc1": 128, "embedding_dim": 16},
}
_REFERENCE_D = 512


class UnsupportedShape(ValueError):
    """Grid size incompatible with the two 2x poolings."""


class DimMismatch(ValueError):
    """Decoder output width does not match the target vectors."""


def _scaled_channels(size: str, d: int) -> tuple[int, int]:
    # Proportional widths, floored so toy configs keep enough feature
    # diversity for gradients to flow.
    c1_ref, c2_ref = _REFERENCE[size]["conv"]
    if d == _REFERENCE_D:
        return c1_ref, c2_ref
    scale = d / _REFERENCE_D
    return max(8, round(c1_ref * scale)), max(4, round(c2_ref * scale))


def build_architecture(
    name: str, d: int = 512, grid_size: int = 16
) -> tuple[Network, Network]:
    """Encoder and decoder networks for one architecture name.

    The encoder ends in tanh (embedding values in [-1, 1]); both decoders
    end in sigmoid (inputs live in [0, 1]). The full-cuboid decoder's unpool
    layers consume the argmax indices saved by the encoder's pooling layers
    during the same forward pass.
    """
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; pick one of {ARCHITECTURES}")
    if grid_size % 4 != 0 or grid_size < 4:
        raise UnsupportedShape(
            f"grid_size {grid_size} must be a positive multiple of 4 "
            "(two 2x poolings)"
        )
    size, style = name.split("_")
    ref = _REFERENCE[size]
    c1, c2 = _scaled_channels(size, d)
    fc1 = ref["fc1"]
    ell = ref["embedding_dim"]
    q = grid_size // 4
    unrolled = q * q * c2

    pool1 = MaxPool2d(2, 2)
    pool2 = MaxPool2d(2, 2)
    encoder = Network(
        [
            Conv2d(d, c1, kernel=3, pad=1),
            BatchNorm(c1),
            Activation("relu"),
            pool1,
            Conv2d(c1, c2, kernel=3, pad=1),
            BatchNorm(c2),
            Activation("relu"),
            pool2,
            Unroll(),
            Dense(unrolled, fc1),
            Activation("relu"),
            Dense(fc1, ell),
            Activation("tanh"),
        ],
        name="encoder",
    )

    if style == "cbow":
        decoder = Network(
            [
                Dense(ell, fc1),
                Activation("relu"),
                Dense(fc1, d),
                Activation("sigmoid"),
            ],
            name="decoder",
        )
    else:
        decoder = Network(
            [
                Dense(ell, fc1),
                Activation("relu"),
                Dense(fc1, unrolled),
                Activation("relu"),
                Roll(q, q, c2),
                MaxUnpool2d(pool2),
                TransposeConv2d(c2, c1, kernel=3, pad=1),
                Activation("relu"),
                MaxUnpool2d(pool1),
                TransposeConv2d(c1, d, kernel=3, pad=1),
                Activation("sigmoid"),
            ],
            name="decoder",
        )
    return encoder, decoder


def embedding_dim(name: str) -> int:
    return _REFERENCE[name.split("_")[0]]["embedding_dim"]


def architecture_feature_sizes(name: str, d: int = 512, grid_size: int = 16) -> dict[str, int]:
    """Feature counts at each encoder stage, for table audits."""
    size = name.split("_")[0]
    c1, c2 = _scaled_channels(size, d)
    ref = _REFERENCE[size]
    q = grid_size // 4
    return {
        "input": d * grid_size**2,
        "conv1": c1 * (grid_size // 2) ** 2,
        "conv2": c2 * q**2,
        "unroll": c2 * q**2,
        "fc1": ref["fc1"],
        "fc2": ref["embedding_dim"],
    }


def parameter_audit(name: str, d: int = 512, grid_size: int = 16) -> dict:
    """Total and per-layer parameter counts without allocating arrays."""
    encoder, decoder = build_architecture(name, d, grid_size)
    return {
        "architecture": name,
        "d": d,
        "grid_size": grid_size,
        "encoder_total": encoder.param_count,
        "decoder_total": decoder.param_count,
        "total": encoder.param_count + decoder.param_count,
        "encoder_layers": encoder.layer_summaries(),
        "decoder_layers": decoder.layer_summaries(),
    }


# ---------------------------------------------------------------------------
# Unroll contract (module-level, shared with the Unroll/Roll layers)


def unroll(cuboid: np.ndarray) -> np.ndarray:
    """(h, w, c) cuboid -> vector: channel 0 row-major, then channel 1, ..."""
    return np.ascontiguousarray(np.transpose(cuboid, (2, 0, 1))).reshape(-1)


def roll(vector: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    h, w, c = shape
    return vector.reshape(c, h, w).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Losses


def _apply(net, x, training=False):
    if isinstance(net, Network):
        return net.forward(x, training=training)
    return net(x)


def crae_loss(batch: np.ndarray, encoder, decoder) -> float:
    """Mean over the batch of the squared norm of full-cuboid reconstruction
    error."""
    out = _apply(decoder, _apply(encoder, batch))
    diff = out - batch
    return float(np.sum(diff * diff) / batch.shape[0])


def cbow_loss(batch: np.ndarray, centers: np.ndarray, encoder, decoder) -> float:
    """Mean over the batch of the squared norm of center-vector prediction
    error. centers holds the attribute vector of each center coordinate's
    own region, never a grid cell."""
    out = _apply(decoder, _apply(encoder, batch))
    if out.shape[1] != centers.shape[1]:
        raise DimMismatch(
            f"decoder emits {out.shape[1]} values, targets have {centers.shape[1]}"
        )
    diff = out - centers
    return float(np.sum(diff * diff) / batch.shape[0])


class AutoencoderModel:
    """Encoder+decoder pair exposing the training-loop protocol.

    mode "crae" reconstructs the full cuboid (targets are the inputs);
    mode "cbow" predicts the center attribute vector.
    """

    def __init__(self, encoder: Network, decoder: Network, mode: str):
        if mode not in ("crae", "cbow"):
            raise ValueError(f"unknown mode {mode!r}")
        self.encoder = encoder
        self.decoder = decoder
        self.mode = mode

    def initialize(self, seed: int, weight_std: float = 1e-3) -> "AutoencoderModel":
        rng = np.random.default_rng(seed)
        self.encoder.initialize(rng, weight_std)
        self.decoder.initialize(rng, weight_std)
        return self

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(x, training), training)

    def _loss(self, out, targets, n):
        diff = out - targets
        return float(np.sum(diff * diff) / n), 2.0 * diff / n

    def loss_and_grads(self, x, targets):
        n = x.shape[0]
        if self.mode == "cbow" and targets.shape[1] != self.decoder.layers[-2].out_dim:
            raise DimMismatch(
                f"targets have {targets.shape[1]} columns, decoder emits "
                f"{self.decoder.layers[-2].out_dim}"
            )
        self.encoder.zero_grads()
        self.decoder.zero_grads()
        out = self.forward(x, training=True)
        loss, dout = self._loss(out, targets, n)
        self.encoder.backward(self.decoder.backward(dout), need_input_grad=False)
        return loss, dict(self.encoder.gradients() + self.decoder.gradients())

    def eval_loss(self, x, targets):
        out = self.forward(x, training=False)
        return self._loss(out, targets, x.shape[0])[0]

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def state_arrays(self):
        return {**self.encoder.state_arrays(), **self.decoder.state_arrays()}

    def load_state_arrays(self, state):
        self.encoder.load_state_arrays(state)
        self.decoder.load_state_arrays(state)


# ---------------------------------------------------------------------------
# Embeddings


@dataclass
class EmbeddingSet:
    """Per-location embedding vectors plus retained-dimension metadata."""

    embedding_dim: int
    location_ids: list[str]
    values: np.ndarray  # (n, embedding_dim)
    retained_dims: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (len(self.location_ids), self.embedding_dim):
            raise ValueError(
                f"values {self.values.shape} do not match "
                f"{len(self.location_ids)} ids x {self.embedding_dim} dims"
            )
        if not self.retained_dims:
            self.retained_dims = tuple(range(self.embedding_dim))

    def vector(self, location_id: str) -> np.ndarray:
        return self.values[self.location_ids.index(location_id)]

    def retained_values(self) -> np.ndarray:
        return self.values[:, list(self.retained_dims)]

    def summary(self) -> dict:
        """Mean and mean-absolute embedding value (reported side by side;
        published result tables leave which one they show ambiguous)."""
        return {
            "mean_value": float(self.values.mean()) if self.values.size else 0.0,
            "mean_abs_value": float(np.abs(self.values).mean()) if self.values.size else 0.0,
        }


def extract_embeddings(
    encoder: Network,
    location_ids: list[str],
    cuboids: np.ndarray,
    batch_size: int = 256,
    provenance: dict | None = None,
) -> EmbeddingSet:
    """Inference-mode encoder pass (running batch-norm statistics), so the
    result is independent of batch composition."""
    chunks = [
        encoder.forward(cuboids[i : i + batch_size], training=False)
        for i in range(0, cuboids.shape[0], batch_size)
    ]
    values = np.vstack(chunks)
    return EmbeddingSet(
        embedding_dim=values.shape[1],
        location_ids=list(location_ids),
        values=values,
        provenance=dict(provenance or {}),
    )


def saturation_filter(
    embeddings: EmbeddingSet, threshold: float = 1e-3, mass_cut: float = 0.95
) -> EmbeddingSet:
    """Drop dimensions stuck at +-1.

    A dimension is saturated when the fraction of locations with
    |value| >= 1 - threshold exceeds mass_cut.
    """
    near_rail = np.abs(embeddings.values) >= 1.0 - threshold
    frac = near_rail.mean(axis=0)
    retained = tuple(int(j) for j in range(embeddings.embedding_dim) if frac[j] <= mass_cut)
    return replace(
        embeddings,
        retained_dims=retained,
        provenance={
            **embeddings.provenance,
            "saturation": {"threshold": threshold, "mass_cut": mass_cut,
                           "rail_fraction": [float(f) for f in frac]},
        },
    )


def write_embeddings(embeddings: EmbeddingSet, path, meta_path=None) -> None:
    """Delimited export: header location_id,e0..e{l-1}; repr floats so the
    file round-trips bit-exactly and reruns are byte-identical."""
    ell = embeddings.embedding_dim
    with open(path, "w") as fh:
        fh.write("location_id," + ",".join(f"e{j}" for j in range(ell)) + "\n")
        for i, location_id in enumerate(embeddings.location_ids):
            row = ",".join(repr(float(v)) for v in embeddings.values[i])
            fh.write(f"{location_id},{row}\n")
    if meta_path is not None:
        meta = {
            "embedding_dim": ell,
            "retained_dims": list(embeddings.retained_dims),
            "provenance": embeddings.provenance,
            **embeddings.summary(),
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_embeddings(path, meta_path=None) -> EmbeddingSet:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        ell = len(header) - 1
        ids, rows = [], []
        for line in fh:
            parts = line.strip().split(",")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    retained: tuple[int, ...] = ()
    provenance: dict = {}
    if meta_path is not None:
        with open(meta_path) as fh:
            meta = json.load(fh)
        retained = tuple(meta.get("retained_dims", ()))
        provenance = meta.get("provenance", {})
    return EmbeddingSet(
        embedding_dim=ell,
        location_ids=ids,
        values=np.array(rows, dtype=np.float64),
        retained_dims=retained,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"GEONET01"
CHECKPOINT_VERSION = 1


def save_model(
    path,
    architecture: str,
    d: int,
    grid_size: int,
    model: AutoencoderModel,
    meta: dict | None = None,
) -> None:
    """Self-describing binary container: json header (layer list, shapes,
    version) followed by raw little-endian float64 arrays. Deterministic
    bytes for identical state."""
    state = model.state_arrays()
    arrays = []
    offset = 0
    for key in sorted(state):
        arr = np.ascontiguousarray(state[key], dtype=np.float64)
        arrays.append((key, arr))
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": architecture,
        "d": d,
        "grid_size": grid_size,
        "mode": model.mode,
        "layers": {
            "encoder": model.encoder.layer_summaries(),
            "decoder": model.decoder.layer_summaries(),
        },
        "arrays": [
            {"key": key, "shape": list(arr.shape), "nbytes": arr.nbytes}
            for key, arr in arrays
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def load_model(path) -> tuple[AutoencoderModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode())
        state = {}
        for entry in header["arrays"]:
            buf = fh.read(entry["nbytes"])
            state[entry["key"]] = np.frombuffer(buf, dtype=np.float64).reshape(
                entry["shape"]
            ).copy()
    encoder, decoder = build_architecture(
        header["architecture"], header["d"], header["grid_size"]
    )
    model = AutoencoderModel(encoder, decoder, header["mode"])
    model.load_state_arrays(state)
    return model, header


def checkpoint_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
