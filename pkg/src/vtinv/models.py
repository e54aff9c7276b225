"""The four inversion architectures (ST-5, ST-8, MT-5, ST-5-cw11).

Every variant shares the trunk ``dense(tanh) -> dense(tanh) -> BiLSTM ->
BiLSTM``. ST-5 ends in a linear dense layer; ST-8 inserts three dense layers
of the output width (tanh, tanh, linear) before that output layer; MT-5 adds
a softmax phone head on the second BiLSTM; ST-5-cw11 is ST-5 fed with
11-frame context windows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from vtinv.corpus import ARTICULATORS, COORDS_PER_ARTICULATOR, CONTOUR_DIM, N_PHONES
from vtinv.errors import DataError, DimensionError, NumericError
from vtinv.metrics import cross_entropy_loss, mse_loss
from vtinv import nn

VARIANTS = ("ST5", "ST8", "MT5", "ST5_CW11")
VARIANT_ALIASES = {"ST-5": "ST5", "ST-8": "ST8", "MT-5": "MT5", "ST-5-cw11": "ST5_CW11"}
DISPLAY_NAMES = {"ST5": "ST-5", "ST8": "ST-8", "MT5": "MT-5", "ST5_CW11": "ST-5-cw11"}
TASK_MODES = ("AAT", "ABA")
FEATURE_DIM = 39
CONTEXT_RADIUS = 5


def canonical_variant(name: str) -> str:
    v = VARIANT_ALIASES.get(name, name).upper().replace("-", "_")
    if v not in VARIANTS:
        raise DataError(f"bad spec: unknown variant {name!r}")
    return v


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "ST5"
    task_mode: str = "AAT"
    articulator: str | None = None
    feature_dim: int = FEATURE_DIM
    hidden_width: int = 300
    n_phones: int = N_PHONES
    context_radius: int = CONTEXT_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.task_mode not in TASK_MODES:
            raise DataError(f"bad spec: task_mode must be one of {TASK_MODES}")
        if self.task_mode == "ABA" and self.articulator not in ARTICULATORS:
            raise DataError(f"bad spec: ABA needs one of {ARTICULATORS}")
        if self.task_mode == "AAT" and self.articulator is not None:
            raise DataError("bad spec: AAT models predict every articulator")
        if min(self.feature_dim, self.hidden_width, self.n_phones) <= 0 or self.context_radius < 0:
            raise DataError("bad spec: sizes must be positive")

    @property
    def input_dim(self) -> int:
        if self.variant == "ST5_CW11":
            return self.feature_dim * (2 * self.context_radius + 1)
        return self.feature_dim

    @property
    def output_dim(self) -> int:
        return COORDS_PER_ARTICULATOR if self.task_mode == "ABA" else CONTOUR_DIM

    @property
    def has_phone_head(self) -> bool:
        return self.variant == "MT5"

    @property
    def uses_context(self) -> bool:
        return self.variant == "ST5_CW11"

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class ModelOutput:
    contours: np.ndarray                   # (B, T, output_dim), normalized space
    phone_probs: np.ndarray | None = None  # (B, T, n_phones)


@dataclass
class Sample:
    """One utterance ready for the network."""

    x: np.ndarray
    y: np.ndarray
    phones: np.ndarray | None = None


def pad_batch(arrays: Sequence[np.ndarray], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(a) for a in arrays])
    out = np.zeros((len(arrays), lengths.max()) + arrays[0].shape[1:], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
    return out, lengths


class InversionModel:
    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        rng = np.random.default_rng(seed)
        p = self.params = nn.ParameterStore(np.float64)
        H, out = spec.hidden_width, spec.output_dim
        self.trunk: list[nn.Layer] = [
            nn.Dense(p, "dense1", spec.input_dim, H, "tanh", rng),
            nn.Dense(p, "dense2", H, H, "tanh", rng),
            nn.BiLSTM(p, "bilstm1", H, H, rng),
            nn.BiLSTM(p, "bilstm2", 2 * H, H, rng),
        ]
        self.regression_head: list[nn.Layer] = []
        width = 2 * H
        if spec.variant == "ST8":
            for i, act in enumerate(("tanh", "tanh", "identity"), start=1):
                self.regression_head.append(nn.Dense(p, f"extra{i}", width, out, act, rng))
                width = out
        self.regression_head.append(nn.Dense(p, "output", width, out, "identity", rng))
        self.phone_head = nn.Dense(p, "phones", 2 * H, spec.n_phones, "identity", rng) \
            if spec.has_phone_head else None
        if np.dtype(dtype) != np.float64:
            self.set_dtype(dtype)
        self._forward_done = False

    def set_dtype(self, dtype) -> None:
        new = self.params.astype(dtype)
        for layer in self._layers():
            for d in [layer] + list(getattr(layer, "directions", ())):
                d.params = new
        self.params = new

    def _layers(self) -> list[nn.Layer]:
        return self.trunk + self.regression_head + ([self.phone_head] if self.phone_head else [])

    @property
    def n_parameters(self) -> int:
        return self.params.size

    def forward(self, x: np.ndarray, lengths: np.ndarray | None = None) -> ModelOutput:
        x = np.asarray(x, dtype=self.params.dtype)
        if x.ndim != 3 or x.shape[-1] != self.spec.input_dim:
            raise DimensionError(f"dimension error: expected (batch, time, {self.spec.input_dim}) input, "
                                 f"got {x.shape}")
        if x.shape[1] == 0:
            raise DataError("empty sequence")
        if lengths is None:
            lengths = np.full(len(x), x.shape[1])
        h = x
        for layer in self.trunk:
            h = layer.forward(h, lengths)
        y = h
        for layer in self.regression_head:
            y = layer.forward(y, lengths)
        probs = None
        if self.phone_head is not None:
            probs = nn.softmax(self.phone_head.forward(h, lengths))
        self._forward_done = True
        return ModelOutput(y, probs)

    def backward(self, d_contours: np.ndarray, d_logits: np.ndarray | None = None) -> nn.ParameterStore:
        """Gradient of the loss given its derivatives w.r.t. the outputs of the last ``forward``."""
        if not self._forward_done:
            raise NumericError("no forward state: call forward before backward")
        grads = self.params.zeros_like()
        g = d_contours
        for layer in reversed(self.regression_head):
            g = layer.backward(g, grads)
        if self.phone_head is not None and d_logits is not None:
            g = g + self.phone_head.backward(d_logits, grads)
        for layer in reversed(self.trunk):
            g = layer.backward(g, grads)
        return grads

    def forward_utterance(self, frames: np.ndarray) -> ModelOutput:
        frames = np.asarray(frames)
        if frames.ndim != 2:
            raise DimensionError("dimension error: utterance must be (time, features)")
        out = self.forward(frames[None])
        return ModelOutput(out.contours[0], None if out.phone_probs is None else out.phone_probs[0])

    def predict(self, xs: Sequence[np.ndarray], batch_size: int = 10) -> list[ModelOutput]:
        results = []
        for start in range(0, len(xs), batch_size):
            chunk = xs[start:start + batch_size]
            X, lengths = pad_batch(chunk, self.params.dtype)
            out = self.forward(X, lengths)
            for i, L in enumerate(lengths):
                results.append(ModelOutput(out.contours[i, :L],
                                           None if out.phone_probs is None else out.phone_probs[i, :L]))
        return results

    def objective(self, batch: Sequence[Sample], need_grad: bool = True):
        """Mean over utterances of each utterance's mean loss.

        Per utterance the loss is the MSE over all frames and coordinates, plus
        (for MT-5) the cross-entropy averaged over frames. Returns
        ``(loss, grads)``; ``grads`` is None when ``need_grad`` is False.
        """
        X, lengths = pad_batch([s.x for s in batch], self.params.dtype)
        out = self.forward(X, lengths)
        B = len(batch)
        total = 0.0
        d_c = np.zeros_like(out.contours)
        d_l = np.zeros_like(out.phone_probs) if out.phone_probs is not None else None
        for b, s in enumerate(batch):
            L = lengths[b]
            loss, g = mse_loss(s.y, out.contours[b, :L])
            total += loss
            d_c[b, :L] = g / B
            if d_l is not None:
                if s.phones is None:
                    raise DataError("MT-5 training requires phone labels")
                onehot = np.zeros((L, self.spec.n_phones))
                onehot[np.arange(L), s.phones] = 1.0
                ce, _, gl = cross_entropy_loss(onehot, out.phone_probs[b, :L])
                total += ce / L
                d_l[b, :L] = gl / (L * B)
        loss = total / B
        if not need_grad:
            return loss, None
        return loss, self.backward(d_c, d_l)


    def loss_terms(self, batch: Sequence[Sample]) -> nn.LossTerms:
        """Same loss as ``objective`` in unreduced form, for finite differencing."""
        X, lengths = pad_batch([s.x for s in batch], self.params.dtype)
        out = self.forward(X, lengths)
        B = len(batch)
        terms = nn.LossTerms()
        for b, s in enumerate(batch):
            L = lengths[b]
            terms.squares.append((1.0 / (B * s.y.size), out.contours[b, :L] - s.y))
            if out.phone_probs is not None:
                logits = self.phone_head._cache[1][b, :L]
                z = logits - logits.max(axis=1, keepdims=True)
                log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
                terms.linear.append((-1.0 / (B * L), log_probs[np.arange(L), s.phones]))
        return terms


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> InversionModel:
    return InversionModel(spec, seed, dtype)


def check_model_gradients(model: InversionModel, batch: Sequence[Sample], eps: float = 1e-4,
                          tolerance: float = 1e-4, n_coords: int = 200, seed: int = 0) -> nn.GradCheckReport:
    _, grads = model.objective(batch)
    return nn.gradient_check(lambda: model.loss_terms(batch), model.params, grads,
                             eps=eps, tolerance=tolerance, n_coords=n_coords,
                             rng=np.random.default_rng(seed))


def random_batch(spec: ModelSpec, lengths: Sequence[int], seed: int = 0) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [Sample(rng.standard_normal((T, spec.input_dim)), rng.standard_normal((T, spec.output_dim)),
                   rng.integers(0, spec.n_phones, size=T) if spec.has_phone_head else None)
            for T in lengths]


def save_model(path, model: InversionModel) -> None:
    nn.save_checkpoint(path, model.spec.to_dict(), model.params)


def load_model(path) -> InversionModel:
    header = nn.read_checkpoint_header(path)
    model = InversionModel(ModelSpec.from_dict(header["spec"]))
    nn.load_checkpoint_into(path, model.params)
    return model
