"""Speaker-conditioned autoregressive acoustic networks, trained from scratch.

Two variants share one implementation:

* SAR - feedforward layers, bidirectional recurrent layers, linear output;
  regresses spectral frames (MSE).
* DAR - feedforward layers, a bidirectional layer and a unidirectional
  recurrent layer fed back the previously generated F0 class; classifies
  quantized F0 (cross-entropy).

The first hidden layer is always feedforward and carries the per-speaker bias
``h1 = tanh(W1 x + c1 + b_k)`` with ``b_k = P @ onehot(k)``. Single-speaker
models have no ``P``. Recurrent cells are plain tanh recurrences; gradients
are exact back-propagation through time.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from corpus import Corpus, TrainingSet, TrainingSetRecipe, Utterance
from errors import CorpusFormatError, TrainingDivergedError, ValidationError
from features import AcousticTrack, FeatureConfig, dequantize_f0_track, quantize_f0_track

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'MSAM'
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct('<4sHHI')

LAYER_KINDS = ('ff', 'bi', 'ar')
ACTIVATIONS = ('tanh', 'linear')


class Variant(str, Enum):
    SAR = 'sar'
    DAR = 'dar'


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int
    activation: str = 'tanh'

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f'unknown layer kind {self.kind!r}')
        if self.width < 1:
            raise ValidationError(f'layer width must be >= 1, got {self.width}')
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f'unknown activation {self.activation!r}')
        if self.kind != 'ff' and self.activation != 'tanh':
            raise ValidationError('recurrent layers are tanh only')

    @property
    def output_width(self) -> int:
        return 2 * self.width if self.kind == 'bi' else self.width


@dataclass(frozen=True)
class NetworkTopology:
    variant: Variant
    d_in: int
    d_out: int
    layers: Tuple[LayerSpec, ...]
    n_speakers: int = 1
    embed_dim: int = 4

    def __post_init__(self):
        object.__setattr__(self, 'variant', Variant(self.variant))
        object.__setattr__(self, 'layers', tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        if self.d_in < 1 or self.d_out < 1:
            raise ValidationError('d_in and d_out must be >= 1')
        if not self.layers or self.layers[0].kind != 'ff':
            raise ValidationError('the first hidden layer must be feedforward (it carries the speaker bias)')
        if self.n_speakers < 1:
            raise ValidationError('n_speakers must be >= 1')
        kinds = [l.kind for l in self.layers]
        if self.variant is Variant.SAR and 'ar' in kinds:
            raise ValidationError('SAR networks have no feedback layer')
        if self.variant is Variant.DAR:
            if kinds.count('ar') != 1 or kinds[-1] != 'ar':
                raise ValidationError('DAR networks need exactly one feedback layer, as the last hidden layer')
            if self.d_out < 2:
                raise ValidationError('DAR output needs at least two classes')
            if self.embed_dim < 1:
                raise ValidationError('embed_dim must be >= 1')

    @classmethod
    def sar(cls, d_in: int, d_mgc: int, n_speakers: int = 1,
            widths: Sequence[int] = (32, 32, 16, 16)) -> 'NetworkTopology':
        ff1, ff2, bi1, bi2 = widths
        layers = (LayerSpec('ff', ff1), LayerSpec('ff', ff2), LayerSpec('bi', bi1), LayerSpec('bi', bi2))
        return cls(Variant.SAR, d_in, d_mgc, layers, n_speakers)

    @classmethod
    def dar(cls, d_in: int, n_classes: int, n_speakers: int = 1,
            widths: Sequence[int] = (32, 32, 16, 8), embed_dim: int = 4) -> 'NetworkTopology':
        ff1, ff2, bi, ar = widths
        layers = (LayerSpec('ff', ff1), LayerSpec('ff', ff2), LayerSpec('bi', bi), LayerSpec('ar', ar))
        return cls(Variant.DAR, d_in, n_classes, layers, n_speakers, embed_dim)

    @property
    def has_speaker_code(self) -> bool:
        return self.n_speakers > 1

    @property
    def start_symbol(self) -> int:
        return self.d_out

    def with_speakers(self, n_speakers: int) -> 'NetworkTopology':
        return NetworkTopology(self.variant, self.d_in, self.d_out, self.layers, n_speakers, self.embed_dim)

    def to_mapping(self) -> dict:
        return {'variant': self.variant.value, 'd_in': self.d_in, 'd_out': self.d_out,
                'layers': [asdict(l) for l in self.layers],
                'n_speakers': self.n_speakers, 'embed_dim': self.embed_dim}

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'NetworkTopology':
        return cls(Variant(data['variant']), int(data['d_in']), int(data['d_out']),
                   tuple(LayerSpec(**l) for l in data['layers']),
                   int(data.get('n_speakers', 1)), int(data.get('embed_dim', 4)))


def param_shapes(topology: NetworkTopology) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    d_prev = topology.d_in
    for i, spec in enumerate(topology.layers):
        w = spec.width
        if spec.kind == 'ff':
            shapes[f'l{i}.W'] = (w, d_prev)
            shapes[f'l{i}.c'] = (w,)
            if i == 0 and topology.has_speaker_code:
                shapes['spk.P'] = (w, topology.n_speakers)
        elif spec.kind == 'bi':
            for d in ('fw', 'bw'):
                shapes[f'l{i}.{d}.Wx'] = (w, d_prev)
                shapes[f'l{i}.{d}.Wh'] = (w, w)
                shapes[f'l{i}.{d}.b'] = (w,)
        else:
            shapes[f'l{i}.Wx'] = (w, d_prev)
            shapes[f'l{i}.Wh'] = (w, w)
            shapes[f'l{i}.Wf'] = (w, topology.embed_dim)
            shapes[f'l{i}.b'] = (w,)
            shapes['emb.E'] = (topology.d_out + 1, topology.embed_dim)
        d_prev = spec.output_width
    shapes['out.W'] = (topology.d_out, d_prev)
    shapes['out.b'] = (topology.d_out,)
    return shapes


def init_params(topology: NetworkTopology, seed: int) -> Dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(topology).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _activate(a: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(a) if activation == 'tanh' else a


def _recur(drive: np.ndarray, Wh: np.ndarray, reverse: bool = False) -> np.ndarray:
    T, w = drive.shape
    h = np.zeros((T, w))
    state = np.zeros(w)
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        state = np.tanh(drive[t] + Wh @ state)
        h[t] = state
    return h


def _recur_backward(h: np.ndarray, dh: np.ndarray, Wh: np.ndarray, reverse: bool = False):
    T, w = h.shape
    d_drive = np.zeros_like(h)
    dWh = np.zeros_like(Wh)
    carry = np.zeros(w)
    zero = np.zeros(w)
    for t in (range(T) if reverse else range(T - 1, -1, -1)):
        da = (dh[t] + carry) * (1.0 - h[t] ** 2)
        d_drive[t] = da
        if reverse:
            prev = h[t + 1] if t + 1 < T else zero
        else:
            prev = h[t - 1] if t > 0 else zero
        dWh += np.outer(da, prev)
        carry = Wh.T @ da
    return d_drive, dWh


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    states: List[tuple] = field(default_factory=list)
    last: Optional[np.ndarray] = None
    speaker: int = 0
    feedback: Optional[np.ndarray] = None
    chosen: Optional[np.ndarray] = None


class AcousticNetwork:
    """Topology plus parameter tensors; forward passes and exact gradients."""

    def __init__(self, topology: NetworkTopology, params: Mapping[str, np.ndarray]):
        expected = param_shapes(topology)
        if set(expected) != set(params):
            raise ValidationError(f'parameter names do not match topology: '
                                  f'missing {sorted(set(expected) - set(params))}, '
                                  f'extra {sorted(set(params) - set(expected))}')
        for name, shape in expected.items():
            if np.shape(params[name]) != shape:
                raise ValidationError(f'{name}: expected shape {shape}, got {np.shape(params[name])}')
        self.topology = topology
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in expected}

    @classmethod
    def initialize(cls, topology: NetworkTopology, seed: int) -> 'AcousticNetwork':
        return cls(topology, init_params(topology, seed))

    def _check_inputs(self, x: np.ndarray, speaker: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.topology.d_in:
            raise ValidationError(f'expected input frames of dimension {self.topology.d_in}, got shape {x.shape}')
        if x.shape[0] < 1:
            raise ValidationError('empty input sequence')
        if not 0 <= speaker < self.topology.n_speakers:
            raise ValidationError(f'speaker index {speaker} outside 0..{self.topology.n_speakers - 1}')
        return x

    def speaker_bias(self, speaker: int) -> np.ndarray:
        if not self.topology.has_speaker_code:
            return np.zeros(self.topology.layers[0].width)
        return self.params['spk.P'][:, speaker]

    def first_layer_preactivation(self, x: np.ndarray, speaker: int) -> np.ndarray:
        p = self.params
        single = np.asarray(x).ndim == 1
        a = self._check_inputs(x, speaker) @ p['l0.W'].T + p['l0.c'] + self.speaker_bias(speaker)
        return a[0] if single else a

    def first_layer_forward(self, x: np.ndarray, speaker: int) -> np.ndarray:
        return _activate(self.first_layer_preactivation(x, speaker), self.topology.layers[0].activation)

    def _hidden(self, x: np.ndarray, speaker: int, cache: ForwardCache, stop: int) -> np.ndarray:
        p = self.params
        z = x
        for i, spec in enumerate(self.topology.layers[:stop]):
            cache.inputs.append(z)
            if spec.kind == 'ff':
                a = z @ p[f'l{i}.W'].T + p[f'l{i}.c']
                if i == 0:
                    a = a + self.speaker_bias(speaker)
                h = _activate(a, spec.activation)
                cache.states.append((h,))
            else:
                hf = _recur(z @ p[f'l{i}.fw.Wx'].T + p[f'l{i}.fw.b'], p[f'l{i}.fw.Wh'])
                hb = _recur(z @ p[f'l{i}.bw.Wx'].T + p[f'l{i}.bw.b'], p[f'l{i}.bw.Wh'], reverse=True)
                cache.states.append((hf, hb))
                h = np.concatenate([hf, hb], axis=1)
            z = h
        return z

    def _feedback_layer(self, z: np.ndarray, previous: Optional[np.ndarray]):
        """Run the feedback recurrence; ``previous`` None means free-running."""
        p = self.params
        i = len(self.topology.layers) - 1
        Wh, Wf, E = p[f'l{i}.Wh'], p[f'l{i}.Wf'], p['emb.E']
        Wo, bo = p['out.W'], p['out.b']
        drive = z @ p[f'l{i}.Wx'].T + p[f'l{i}.b']
        T, w = drive.shape
        h = np.zeros((T, w))
        fed = np.zeros(T, dtype=np.int64)
        chosen = np.zeros(T, dtype=np.int64)
        state = np.zeros(w)
        prev = self.topology.start_symbol
        for t in range(T):
            if previous is not None:
                prev = int(previous[t])
            fed[t] = prev
            state = np.tanh(drive[t] + Wh @ state + Wf @ E[prev])
            h[t] = state
            if previous is None:
                prev = chosen[t] = int(np.argmax(Wo @ state + bo))
        return h, fed, chosen

    def forward(self, x: np.ndarray, speaker: int = 0, reference: Optional[np.ndarray] = None):
        """Full forward pass returning (outputs, cache).

        For DAR, ``reference`` holds the target classes for teacher forcing;
        without it the network runs free, feeding back its own argmax.
        """
        x = self._check_inputs(x, speaker)
        cache = ForwardCache(speaker=speaker)
        top = self.topology
        if top.variant is Variant.SAR:
            z = self._hidden(x, speaker, cache, len(top.layers))
        else:
            z = self._hidden(x, speaker, cache, len(top.layers) - 1)
            previous = None
            if reference is not None:
                reference = np.asarray(reference, dtype=np.int64)
                if reference.shape != (x.shape[0],):
                    raise ValidationError(
                        f'teacher forcing needs {x.shape[0]} reference classes, got {reference.shape}')
                previous = np.concatenate([[top.start_symbol], reference[:-1]])
            cache.inputs.append(z)
            h, fed, chosen = self._feedback_layer(z, previous)
            cache.states.append((h,))
            cache.feedback = fed
            if previous is None:
                cache.chosen = chosen
            z = h
        cache.last = z
        return z @ self.params['out.W'].T + self.params['out.b'], cache

    def backward(self, cache: ForwardCache, d_out: np.ndarray) -> Dict[str, np.ndarray]:
        p = self.params
        grads = {name: np.zeros_like(v) for name, v in p.items()}
        grads['out.W'] = d_out.T @ cache.last
        grads['out.b'] = d_out.sum(axis=0)
        dz = d_out @ p['out.W']
        for i in range(len(self.topology.layers) - 1, -1, -1):
            spec = self.topology.layers[i]
            z = cache.inputs[i]
            state = cache.states[i]
            if spec.kind == 'ff':
                (h,) = state
                da = dz * (1.0 - h ** 2) if spec.activation == 'tanh' else dz
                grads[f'l{i}.W'] = da.T @ z
                grads[f'l{i}.c'] = da.sum(axis=0)
                if i == 0 and self.topology.has_speaker_code:
                    grads['spk.P'][:, cache.speaker] = da.sum(axis=0)
                dz = da @ p[f'l{i}.W']
            elif spec.kind == 'bi':
                hf, hb = state
                w = spec.width
                dz_next = np.zeros_like(z)
                for d, h, dh, rev in (('fw', hf, dz[:, :w], False), ('bw', hb, dz[:, w:], True)):
                    d_drive, dWh = _recur_backward(h, dh, p[f'l{i}.{d}.Wh'], reverse=rev)
                    grads[f'l{i}.{d}.Wh'] = dWh
                    grads[f'l{i}.{d}.Wx'] = d_drive.T @ z
                    grads[f'l{i}.{d}.b'] = d_drive.sum(axis=0)
                    dz_next += d_drive @ p[f'l{i}.{d}.Wx']
                dz = dz_next
            else:
                (h,) = state
                d_drive, dWh = _recur_backward(h, dz, p[f'l{i}.Wh'])
                emb = p['emb.E'][cache.feedback]
                grads[f'l{i}.Wh'] = dWh
                grads[f'l{i}.Wx'] = d_drive.T @ z
                grads[f'l{i}.Wf'] = d_drive.T @ emb
                grads[f'l{i}.b'] = d_drive.sum(axis=0)
                np.add.at(grads['emb.E'], cache.feedback, d_drive @ p[f'l{i}.Wf'])
                dz = d_drive @ p[f'l{i}.Wx']
        return grads

    def loss_and_gradients(self, x: np.ndarray, targets: np.ndarray, speaker: int = 0,
                           teacher_forcing: bool = True):
        top = self.topology
        if top.variant is Variant.DAR:
            targets = np.asarray(targets, dtype=np.int64)
            feedback = targets
            if not teacher_forcing:
                feedback = self.forward_dar(x, speaker)[1]
            outputs, cache = self.forward(x, speaker, reference=feedback)
        else:
            outputs, cache = self.forward(x, speaker)
        value = loss(outputs, targets, top.variant)
        return value, self.backward(cache, loss_gradient(outputs, targets, top.variant))

    def forward_sar(self, x: np.ndarray, speaker: int = 0) -> np.ndarray:
        if self.topology.variant is not Variant.SAR:
            raise ValidationError('forward_sar needs a SAR network')
        return self.forward(x, speaker)[0]

    def forward_dar(self, x: np.ndarray, speaker: int = 0, reference: Optional[np.ndarray] = None):
        if self.topology.variant is not Variant.DAR:
            raise ValidationError('forward_dar needs a DAR network')
        logits, cache = self.forward(x, speaker, reference=reference)
        if cache.chosen is not None:
            return logits, cache.chosen
        return logits, np.argmax(logits, axis=1)


# ------------------------------------------------------------------ objectives

def loss(predictions: np.ndarray, targets: np.ndarray, variant: Variant) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape[0] == 0:
        raise ValidationError('loss of an empty sequence')
    if len(targets) != predictions.shape[0]:
        raise ValidationError(f'{predictions.shape[0]} predictions vs {len(targets)} targets')
    if Variant(variant) is Variant.SAR:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != predictions.shape:
            raise ValidationError(f'target shape {targets.shape} vs prediction shape {predictions.shape}')
        return float(np.mean((predictions - targets) ** 2))
    targets = np.asarray(targets, dtype=np.int64)
    picked = predictions[np.arange(len(targets)), targets]
    return float(np.mean(logsumexp(predictions, axis=1) - picked))


def loss_gradient(predictions: np.ndarray, targets: np.ndarray, variant: Variant) -> np.ndarray:
    if Variant(variant) is Variant.SAR:
        return 2.0 * (predictions - targets) / predictions.size
    T = predictions.shape[0]
    grad = softmax(predictions, axis=1)
    grad[np.arange(T), targets] -= 1.0
    return grad / T


# ------------------------------------------------------------------ module API

def first_layer_forward(model, x: np.ndarray, speaker: int) -> np.ndarray:
    return _network(model).first_layer_forward(x, speaker)


def forward_sar(model, linguistic: np.ndarray, speaker: int = 0) -> np.ndarray:
    return _network(model).forward_sar(linguistic, speaker)


def forward_dar(model, linguistic: np.ndarray, speaker: int = 0, reference: Optional[np.ndarray] = None):
    """Return (logits, classes); teacher-forced when ``reference`` is given."""
    return _network(model).forward_dar(linguistic, speaker, reference)


def backward(model, linguistic: np.ndarray, targets: np.ndarray, speaker: int = 0):
    """Return (loss, gradients); DAR gradients use teacher forcing."""
    return _network(model).loss_and_gradients(linguistic, targets, speaker)


def _network(model) -> AcousticNetwork:
    return model.network if isinstance(model, TrainedModel) else model


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.05
    n_epochs: int = 10
    early_stop_patience: int = 3
    shuffle_seed: int = 0
    init_seed: int = 0
    grad_clip: Optional[float] = 5.0
    teacher_forcing: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f'learning_rate must be > 0, got {self.learning_rate}')
        if self.n_epochs < 0 or self.early_stop_patience < 1:
            raise ValidationError('n_epochs must be >= 0 and early_stop_patience >= 1')
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError('grad_clip must be positive or None')

    def to_mapping(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'TrainingConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f'unknown training config keys: {sorted(unknown)}')
        return cls(**data)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass(eq=False)
class TrainedModel:
    topology: NetworkTopology
    params: Dict[str, np.ndarray]
    recipe: Optional[TrainingSetRecipe]
    feature_config: FeatureConfig
    speakers: Tuple[str, ...]
    log: Tuple[EpochLog, ...] = ()
    best_epoch: int = 0

    @property
    def network(self) -> AcousticNetwork:
        return AcousticNetwork(self.topology, self.params)

    def speaker_index(self, speaker_id: str) -> int:
        if speaker_id not in self.speakers:
            raise ValidationError(f'model was trained for {list(self.speakers)}, not {speaker_id!r}')
        return self.speakers.index(speaker_id)

    def to_bytes(self) -> bytes:
        shapes = param_shapes(self.topology)
        header = {
            'topology': self.topology.to_mapping(),
            'recipe': self.recipe.to_mapping() if self.recipe else None,
            'feature_config': self.feature_config.to_mapping(),
            'speakers': list(self.speakers),
            'log': [asdict(e) for e in self.log],
            'best_epoch': self.best_epoch,
            'tensors': [{'name': n, 'shape': list(s)} for n, s in shapes.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode('utf-8')
        body = b''.join(self.params[n].astype('<f4').tobytes() for n in shapes)
        return CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, blob: bytes, name: str = '<checkpoint>') -> 'TrainedModel':
        if len(blob) < CHECKPOINT_HEADER.size:
            raise CorpusFormatError(f'{name}: truncated checkpoint')
        magic, version, _, n_header = CHECKPOINT_HEADER.unpack_from(blob)
        if magic != CHECKPOINT_MAGIC:
            raise CorpusFormatError(f'{name}: bad magic {magic!r}')
        if version != CHECKPOINT_VERSION:
            raise CorpusFormatError(f'{name}: unsupported checkpoint version {version}')
        start = CHECKPOINT_HEADER.size
        header = json.loads(blob[start:start + n_header].decode('utf-8'))
        data = np.frombuffer(blob, dtype='<f4', offset=start + n_header)
        params = {}
        pos = 0
        for entry in header['tensors']:
            shape = tuple(entry['shape'])
            size = int(np.prod(shape))
            if pos + size > data.size:
                raise CorpusFormatError(f'{name}: tensor {entry["name"]} is truncated')
            params[entry['name']] = data[pos:pos + size].astype(np.float64).reshape(shape)
            pos += size
        if pos != data.size:
            raise CorpusFormatError(f'{name}: {data.size - pos} trailing floats')
        recipe = header['recipe']
        return cls(
            topology=NetworkTopology.from_mapping(header['topology']),
            params=params,
            recipe=TrainingSetRecipe.from_mapping(recipe) if recipe else None,
            feature_config=FeatureConfig.from_mapping(header['feature_config']),
            speakers=tuple(header['speakers']),
            log=tuple(EpochLog(**e) for e in header['log']),
            best_epoch=int(header['best_epoch']),
        )

    def save(self, path: str) -> None:
        with open(path, 'wb') as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> 'TrainedModel':
        try:
            with open(path, 'rb') as f:
                return cls.from_bytes(f.read(), path)
        except FileNotFoundError:
            raise ValidationError(f'checkpoint not found: {path}') from None

    def write_log_csv(self, path: str) -> None:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['epoch', 'train_loss', 'val_loss'])
            for e in self.log:
                writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss)])


def training_targets(utt: Utterance, variant: Variant, feature_config: FeatureConfig) -> np.ndarray:
    if variant is Variant.SAR:
        return utt.acoustic.mgc
    return quantize_f0_track(utt.acoustic.f0, utt.acoustic.voiced, feature_config)


def model_speakers(corpus: Corpus, training_set: TrainingSet, topology: NetworkTopology) -> Tuple[str, ...]:
    if topology.has_speaker_code:
        if topology.n_speakers != corpus.n_speakers:
            raise ValidationError(
                f'topology has {topology.n_speakers} speaker codes but the corpus has {corpus.n_speakers} speakers')
        return corpus.speaker_ids
    present = training_set.speakers
    if len(present) != 1:
        raise ValidationError(f'a single-speaker topology cannot train on {len(present)} speakers')
    return present


def _clip(grads: Dict[str, np.ndarray], limit: Optional[float]) -> None:
    if limit is None:
        return
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > limit:
        scale = limit / norm
        for g in grads.values():
            g *= scale


def _mean_loss(network: AcousticNetwork, examples, variant: Variant) -> float:
    total = 0.0
    for x, y, k in examples:
        if variant is Variant.SAR:
            outputs = network.forward_sar(x, k)
        else:
            outputs = network.forward_dar(x, k, reference=y)[0]
        total += loss(outputs, y, variant)
    return total / len(examples)


def train(corpus: Corpus, training_set: TrainingSet, topology: NetworkTopology,
          config: TrainingConfig, label: str = '') -> TrainedModel:
    """Per-utterance SGD with shuffled order; returns the best-validation checkpoint."""
    if training_set.size == 0:
        raise ValidationError('empty training set')
    corpus.check_training_set(training_set)
    fc = corpus.feature_config
    if topology.d_in != corpus.d_lin:
        raise ValidationError(f'topology expects {topology.d_in} linguistic dims, corpus has {corpus.d_lin}')
    expected_out = fc.d_mgc if topology.variant is Variant.SAR else fc.n_classes
    if topology.d_out != expected_out:
        raise ValidationError(f'{topology.variant.value} output must have {expected_out} units, got {topology.d_out}')
    speakers = model_speakers(corpus, training_set, topology)
    index = {spk: i for i, spk in enumerate(speakers)}
    variant = topology.variant
    label = label or training_set.recipe.label

    targets = {}

    def example(utt_id: str):
        utt = corpus.utterance(utt_id)
        if utt_id not in targets:
            targets[utt_id] = training_targets(utt, variant, fc)
        return utt.linguistic, targets[utt_id], index[utt.speaker]

    network = AcousticNetwork.initialize(topology, config.init_seed)
    items = training_set.items
    validation = [example(u) for spk in training_set.speakers for u in corpus.split_ids('validation', spk)]
    best_params = {n: v.copy() for n, v in network.params.items()}
    best_val = np.inf
    best_epoch = 0
    stale = 0
    log = []
    rng = np.random.default_rng(config.shuffle_seed)

    for epoch in range(1, config.n_epochs + 1):
        total = 0.0
        for idx in rng.permutation(len(items)):
            x, y, k = example(items[idx][1])
            value, grads = network.loss_and_gradients(x, y, k, config.teacher_forcing)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch)
            _clip(grads, config.grad_clip)
            for name, g in grads.items():
                network.params[name] -= config.learning_rate * g
            total += value
        train_loss = total / len(items)
        val_loss = _mean_loss(network, validation, variant) if validation else train_loss
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDivergedError(epoch)
        log.append(EpochLog(epoch, train_loss, val_loss))
        logger.info('[train] %s.%s epoch %d train %.5f val %.5f',
                    label, variant.value, epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_params = {n: v.copy() for n, v in network.params.items()}
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                logger.info('[train] %s.%s early stop at epoch %d (best %d)',
                            label, variant.value, epoch, best_epoch)
                break

    return TrainedModel(topology, best_params, training_set.recipe, fc, speakers, tuple(log), best_epoch)


def derive_seed(base_seed: int, label: str) -> int:
    return (int(base_seed) * 1_000_003 + zlib.crc32(label.encode('utf-8'))) % (2 ** 32)


def synthesize(sar_model: TrainedModel, dar_model: TrainedModel, linguistic: np.ndarray,
               speaker: str) -> AcousticTrack:
    """Spectra from the SAR model, F0 from free-running DAR classes."""
    mgc = forward_sar(sar_model, linguistic, sar_model.speaker_index(speaker))
    _, classes = forward_dar(dar_model, linguistic, dar_model.speaker_index(speaker))
    f0, voiced = dequantize_f0_track(classes, dar_model.feature_config)
    return AcousticTrack(mgc, f0, voiced)
