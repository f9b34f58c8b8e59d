"""
Compression operators and the masks they induce.

Kinds:

- ``top_k_global``: keep the K largest magnitudes across all prunable
  tensors, K = round((1 - sparsity) * N_prunable)
- ``top_k_uniform``: the same selection done per tensor
- ``n_m``: keep ``n`` of every consecutive block of ``m`` entries along the
  last axis (2:4 keeps two nonzeros per four)
- ``quantize_symmetric``: per-channel symmetric rounding to ``bits`` bits,
  channels along the first axis

Magnitude ties are broken by lower flat index. Counts use round half away
from zero. Non-prunable tensors (biases, batch-norm) pass through every
operator unless ``respect_prunable_flags`` is off.
"""
import math
from dataclasses import dataclass

import numpy as np

from cramkit.errors import ContractError, ShapeError

__all__ = [
    'KINDS',
    'MASK_KINDS',
    'CompressionSpec',
    'Mask',
    'ProjectiveReport',
    'round_half_away',
    'top_k_mask_global',
    'top_k_mask_uniform',
    'n_m_mask',
    'mask_for',
    'apply_mask',
    'quantize_symmetric',
    'compress',
    'compress_rows',
    'sample_operator',
    'check_projective_region',
    'achieved_sparsity',
    'parse_spec_list',
]

KINDS = ('top_k_global', 'top_k_uniform', 'n_m', 'quantize_symmetric')
MASK_KINDS = ('top_k_global', 'top_k_uniform', 'n_m')
TOP_K_KINDS = ('top_k_global', 'top_k_uniform')

_SHORT_NAMES = {
    'topk_global': 'top_k_global',
    'topk_uniform': 'top_k_uniform',
    'nm': 'n_m',
    'quant': 'quantize_symmetric',
}


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class CompressionSpec:
    """
    Declarative description of one compression operator.
    """

    kind: str
    sparsity: float = 0.0
    n: int = 0
    m: int = 0
    bits: int = 0
    respect_prunable_flags: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError('unknown compression kind {!r}'.format(self.kind))
        if self.kind in TOP_K_KINDS and not 0.0 <= self.sparsity < 1.0:
            raise ContractError('sparsity must be in [0, 1), got {}'.format(self.sparsity))
        if self.kind == 'n_m' and not 0 < self.n < self.m:
            raise ContractError('N:M needs 0 < n < m, got {}:{}'.format(self.n, self.m))
        if self.kind == 'quantize_symmetric' and self.bits < 2:
            raise ContractError('quantization needs at least 2 bits, got {}'.format(self.bits))

    @classmethod
    def top_k_global(cls, sparsity, **kwargs):
        return cls('top_k_global', sparsity=float(sparsity), **kwargs)

    @classmethod
    def top_k_uniform(cls, sparsity, **kwargs):
        return cls('top_k_uniform', sparsity=float(sparsity), **kwargs)

    @classmethod
    def n_m(cls, n, m, **kwargs):
        return cls('n_m', n=int(n), m=int(m), **kwargs)

    @classmethod
    def quantize(cls, bits, **kwargs):
        return cls('quantize_symmetric', bits=int(bits), **kwargs)

    @classmethod
    def identity(cls):
        return cls.top_k_global(0.0)

    @property
    def is_mask_kind(self):
        return self.kind in MASK_KINDS

    @property
    def is_top_k(self):
        return self.kind in TOP_K_KINDS

    @property
    def label(self):
        """
        Spec-string form, e.g. ``topk_global:0.5``, ``nm:2:4``, ``quant:4``.
        """
        if self.kind == 'top_k_global':
            return 'topk_global:{:g}'.format(self.sparsity)
        if self.kind == 'top_k_uniform':
            return 'topk_uniform:{:g}'.format(self.sparsity)
        if self.kind == 'n_m':
            return 'nm:{}:{}'.format(self.n, self.m)
        return 'quant:{}'.format(self.bits)

    @property
    def target(self):
        """
        Sparsity or pattern the operator aims for, as reported in sweeps.
        """
        if self.is_top_k:
            return self.sparsity
        if self.kind == 'n_m':
            return '{}:{}'.format(self.n, self.m)
        return '{}bit'.format(self.bits)

    def to_dict(self):
        data = {'kind': self.kind}
        if self.is_top_k:
            data['sparsity'] = self.sparsity
        elif self.kind == 'n_m':
            data['n'] = self.n
            data['m'] = self.m
        else:
            data['bits'] = self.bits
        if not self.respect_prunable_flags:
            data['respect_prunable_flags'] = False
        return data

    @classmethod
    def from_dict(cls, data):
        allowed = {'kind', 'sparsity', 'n', 'm', 'bits', 'respect_prunable_flags'}
        unknown = set(data) - allowed
        if unknown:
            raise ContractError('unknown compression fields {}'.format(sorted(unknown)))
        return cls(**data)


class Mask:
    """
    Boolean support per masked tensor. Tensors without an entry are kept
    whole.

    Args:
        arrays (dict): name -> boolean array shaped like the tensor
    """

    def __init__(self, arrays):
        self.arrays = {name: np.asarray(a, dtype=bool) for name, a in arrays.items()}

    @property
    def num_total(self):
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def num_kept(self):
        return int(sum(int(a.sum()) for a in self.arrays.values()))

    @property
    def coverage(self):
        total = self.num_total
        return self.num_kept / total if total else 1.0

    def apply(self, params):
        """
        Returns:
            ParamSet: ``M * x``; unmasked tensors copied unchanged
        """
        for name, a in self.arrays.items():
            if name not in params:
                raise ShapeError('mask refers to unknown parameter {!r}'.format(name))
            if params[name].shape != a.shape:
                raise ShapeError('{}: mask shape {} does not match {}'.format(name, a.shape, params[name].shape))
        return params.map(lambda entry, x: np.where(self.arrays[entry.name], x, 0.0), names=self.arrays)

    def difference(self, other):
        """
        Fraction of masked entries whose membership differs.
        """
        if set(self.arrays) != set(other.arrays):
            raise ShapeError('masks cover different parameters')
        total = self.num_total
        if not total:
            return 0.0
        changed = sum(int(np.sum(self.arrays[k] != other.arrays[k])) for k in self.arrays)
        return changed / total

    def __eq__(self, other):
        if not isinstance(other, Mask) or set(self.arrays) != set(other.arrays):
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)

    def __repr__(self):
        return 'Mask(tensors={}, coverage={:.4f})'.format(len(self.arrays), self.coverage)


def _targets(params, respect_prunable_flags=True):
    if respect_prunable_flags:
        names = params.prunable_names()
    else:
        names = params.names
    if not names:
        raise ContractError('no prunable parameters to compress')
    return names


def _select_largest(values, k):
    """
    Boolean selection of the k largest magnitudes of a flat vector, ties to
    the lower index.
    """
    keep = np.zeros(values.size, dtype=bool)
    if k > 0:
        order = np.argsort(-np.abs(values), kind='stable')
        keep[order[:k]] = True
    return keep


def top_k_mask_global(params, sparsity, respect_prunable_flags=True):
    """
    Global magnitude selection across the concatenation of prunable tensors.

    Args:
        params (ParamSet): Parameters to rank
        sparsity (float): Fraction of prunable entries to drop, in [0, 1)

    Returns:
        Mask: Exactly ``round((1 - sparsity) * N)`` kept entries
    """
    if not 0.0 <= sparsity < 1.0:
        raise ContractError('sparsity must be in [0, 1), got {}'.format(sparsity))
    names = _targets(params, respect_prunable_flags)
    flat = np.concatenate([params[name].data.reshape(-1) for name in names])
    keep = _select_largest(flat, round_half_away((1.0 - sparsity) * flat.size))
    arrays = {}
    offset = 0
    for name in names:
        shape = params[name].shape
        size = int(np.prod(shape))
        arrays[name] = keep[offset:offset + size].reshape(shape)
        offset += size
    return Mask(arrays)


def top_k_mask_uniform(params, sparsity, respect_prunable_flags=True):
    """
    Per-tensor magnitude selection at the same sparsity everywhere.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ContractError('sparsity must be in [0, 1), got {}'.format(sparsity))
    arrays = {}
    for name in _targets(params, respect_prunable_flags):
        values = params[name].data
        k = round_half_away((1.0 - sparsity) * values.size)
        if k < 1:
            raise ContractError('{}: sparsity {} leaves no surviving entry'.format(name, sparsity))
        arrays[name] = _select_largest(values.reshape(-1), k).reshape(values.shape)
    return Mask(arrays)


def _n_m_keep(blocks, n):
    order = np.argsort(-np.abs(blocks), axis=1, kind='stable')
    keep = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(keep, order[:, :n], True, axis=1)
    return keep


def n_m_mask(params, n, m, respect_prunable_flags=True):
    """
    Keeps the ``n`` largest magnitudes of every block of ``m`` consecutive
    entries along the last axis.
    """
    if not 0 < n < m:
        raise ContractError('N:M needs 0 < n < m, got {}:{}'.format(n, m))
    arrays = {}
    for name in _targets(params, respect_prunable_flags):
        values = params[name].data
        if values.shape[-1] % m:
            raise ShapeError('{}: trailing dimension {} is not divisible by {}'.format(name, values.shape[-1], m))
        arrays[name] = _n_m_keep(values.reshape(-1, m), n).reshape(values.shape)
    return Mask(arrays)


def mask_for(params, spec):
    """
    Mask a mask-inducing spec selects on ``params``.
    """
    if spec.kind == 'top_k_global':
        return top_k_mask_global(params, spec.sparsity, spec.respect_prunable_flags)
    if spec.kind == 'top_k_uniform':
        return top_k_mask_uniform(params, spec.sparsity, spec.respect_prunable_flags)
    if spec.kind == 'n_m':
        return n_m_mask(params, spec.n, spec.m, spec.respect_prunable_flags)
    raise ContractError('{} does not induce a mask'.format(spec.kind))


def apply_mask(params, mask):
    return mask.apply(params)


def _quantize_channels(channels, bits):
    qmax = 2 ** (bits - 1) - 1
    out = channels.copy()
    peaks = np.max(np.abs(channels), axis=1)
    for c, peak in enumerate(peaks):
        if peak == 0.0:
            continue
        step = peak / qmax
        ratio = channels[c] / step
        levels = np.clip(np.sign(ratio) * np.floor(np.abs(ratio) + 0.5), -qmax, qmax)
        # already on the grid: leave untouched so quantizing twice is exact
        if np.all(np.abs(ratio - levels) <= 1e-9):
            continue
        out[c] = levels * step
    return out


def quantize_symmetric(params, bits, respect_prunable_flags=True):
    """
    Symmetric per-channel quantization, round half away from zero.

    Each channel (first axis) uses scale ``max|w_c| / (2^(bits-1) - 1)``;
    all-zero channels pass through.

    Returns:
        ParamSet: Quantized parameters
    """
    if bits < 2:
        raise ContractError('quantization needs at least 2 bits, got {}'.format(bits))
    names = _targets(params, respect_prunable_flags)

    def quantize(entry, values):
        channels = values.reshape(values.shape[0], -1) if values.ndim else values.reshape(1, 1)
        return _quantize_channels(channels, bits).reshape(values.shape)
    return params.map(quantize, names=names)


def compress(params, spec):
    """
    Applies the operator ``spec`` describes.

    Returns:
        tuple: ``(compressed ParamSet, Mask or None)``; quantization has no
        mask
    """
    if spec.kind == 'quantize_symmetric':
        return quantize_symmetric(params, spec.bits, spec.respect_prunable_flags), None
    mask = mask_for(params, spec)
    return mask.apply(params), mask


def compress_rows(rows, spec):
    """
    Applies ``spec`` to every row of a 2-d array, each row read as one
    prunable vector (one channel for quantization).

    Returns:
        tuple: ``(compressed rows, boolean masks or None)``
    """
    rows = np.asarray(rows, dtype=np.float64)
    if spec.kind == 'quantize_symmetric':
        return _quantize_channels(rows, spec.bits), None
    if spec.is_top_k:
        k = round_half_away((1.0 - spec.sparsity) * rows.shape[1])
        if spec.kind == 'top_k_uniform' and k < 1:
            raise ContractError('sparsity {} leaves no surviving entry'.format(spec.sparsity))
        order = np.argsort(-np.abs(rows), axis=1, kind='stable')
        keep = np.zeros(rows.shape, dtype=bool)
        np.put_along_axis(keep, order[:, :k], True, axis=1)
    else:
        if rows.shape[1] % spec.m:
            raise ShapeError('row length {} is not divisible by {}'.format(rows.shape[1], spec.m))
        keep = _n_m_keep(rows.reshape(-1, spec.m), spec.n).reshape(rows.shape)
    return np.where(keep, rows, 0.0), keep


def achieved_sparsity(params, respect_prunable_flags=True):
    """
    Fraction of exact zeros among the prunable entries.
    """
    names = _targets(params, respect_prunable_flags)
    total = sum(params[name].size for name in names)
    zeros = sum(int(np.sum(params[name].data == 0.0)) for name in names)
    return zeros / total


def sample_operator(specs, rng):
    """
    Uniform draw from ``specs`` using ``rng``.
    """
    if not specs:
        raise ContractError('cannot sample from an empty operator set')
    return specs[int(rng.integers(len(specs)))]


@dataclass
class ProjectiveReport:
    """
    Attributes:
        mask_equal_fraction (float): Trials whose mask equals the unperturbed one
        gap (float): Smallest magnitude gap at a selection boundary
        gap_bound (float): ``2 * perturbation_scale * sqrt(N)``
        gap_condition (bool): ``gap > gap_bound``
        violations (int): Trials with a changed mask although the gap
            condition holds; always 0 for a projective operator
    """

    mask_equal_fraction: float
    gap: float
    gap_bound: float
    gap_condition: bool
    violations: int
    trials: int


def _boundary_gap(params, spec):
    names = _targets(params, spec.respect_prunable_flags)
    gaps = []
    if spec.kind == 'top_k_global':
        groups = [np.concatenate([params[n].data.reshape(-1) for n in names])]
        keeps = [round_half_away((1.0 - spec.sparsity) * groups[0].size)]
    elif spec.kind == 'top_k_uniform':
        groups = [params[n].data.reshape(-1) for n in names]
        keeps = [round_half_away((1.0 - spec.sparsity) * g.size) for g in groups]
    else:
        groups = [block for n in names for block in params[n].data.reshape(-1, spec.m)]
        keeps = [spec.n] * len(groups)
    for values, k in zip(groups, keeps):
        if 0 < k < values.size:
            ranked = np.sort(np.abs(values))[::-1]
            gaps.append(ranked[k - 1] - ranked[k])
    return min(gaps) if gaps else math.inf


def check_projective_region(params, spec, perturbation_scale, trials, rng):
    """
    Empirical check that a mask operator is locally a fixed projection.

    Each trial adds noise uniform in ``[-scale, scale]`` per coordinate (so
    its norm is at most ``scale * sqrt(N)``) and compares the resulting mask
    with the unperturbed one. When the magnitude gap at the selection
    boundary exceeds ``2 * scale * sqrt(N)`` no rank can cross and every
    trial must keep the mask.

    Returns:
        ProjectiveReport: Agreement statistics
    """
    if not spec.is_mask_kind:
        raise ContractError('projective check needs a mask-inducing spec, got {}'.format(spec.kind))
    reference = mask_for(params, spec)
    n_total = params.size
    gap = _boundary_gap(params, spec)
    bound = 2.0 * perturbation_scale * math.sqrt(n_total)
    condition = gap > bound
    equal = 0
    violations = 0
    for _ in range(trials):
        if perturbation_scale > 0:
            noisy = params.map(lambda entry, x: x + rng.uniform(-perturbation_scale, perturbation_scale, x.shape))
        else:
            noisy = params
        same = mask_for(noisy, spec) == reference
        equal += int(same)
        if condition and not same:
            violations += 1
    fraction = equal / trials if trials else 1.0
    return ProjectiveReport(fraction, float(gap), bound, bool(condition), violations, trials)


def parse_spec_list(text):
    """
    Parses the spec-string grammar: comma-separated ``kind:args`` items, where
    a bare item continues the previous kind.

    ``topk_global:0.5,0.7,0.9`` gives three global Top-K specs,
    ``nm:2:4,4:8`` two N:M specs, ``quant:4`` one quantizer.

    Returns:
        list: CompressionSpec items in order
    """
    specs = []
    kind = None
    for token in (t.strip() for t in text.split(',')):
        if not token:
            raise ContractError('empty item in spec list {!r}'.format(text))
        head, _, rest = token.partition(':')
        if head in _SHORT_NAMES or head in KINDS:
            kind = _SHORT_NAMES.get(head, head)
            args = rest
        elif kind is None:
            raise ContractError('unknown compression kind {!r}'.format(head))
        else:
            args = token
        parts = args.split(':') if args else []
        try:
            if kind in TOP_K_KINDS:
                if len(parts) != 1:
                    raise ContractError('{} takes one sparsity, got {!r}'.format(kind, token))
                specs.append(CompressionSpec(kind, sparsity=float(parts[0])))
            elif kind == 'n_m':
                if len(parts) != 2:
                    raise ContractError('nm takes n:m, got {!r}'.format(token))
                specs.append(CompressionSpec.n_m(int(parts[0]), int(parts[1])))
            else:
                if len(parts) != 1:
                    raise ContractError('quant takes a bit width, got {!r}'.format(token))
                specs.append(CompressionSpec.quantize(int(parts[0])))
        except ValueError:
            raise ContractError('malformed spec item {!r}'.format(token))
    return specs
