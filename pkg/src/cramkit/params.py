"""
Named, ordered parameter collections.

A :class:`ParamSet` is the ``w`` every optimizer and compression operator works
on. It is immutable: arithmetic returns a new set whose tensors are fresh
leaves, so each forward pass starts from clean gradient slots.
"""
from dataclasses import dataclass

import numpy as np

from cramkit.errors import ContractError, ShapeError
from cramkit.tensor import Tensor

__all__ = ['TAGS', 'NON_PRUNABLE_TAGS', 'ParamEntry', 'ParamSet']

TAGS = ('first_layer', 'last_layer', 'bn_scale', 'bn_shift', 'bias', 'weight')
NON_PRUNABLE_TAGS = frozenset(('bn_scale', 'bn_shift', 'bias'))


@dataclass(frozen=True)
class ParamEntry:
    name: str
    tensor: Tensor
    prunable: bool
    tags: frozenset


class ParamSet:
    """
    Ordered list of ``(name, tensor, prunable)`` entries with layer tags.

    Args:
        entries (list): :class:`ParamEntry` items, in order
    """

    def __init__(self, entries):
        seen = set()
        for entry in entries:
            if entry.name in seen:
                raise ContractError('duplicate parameter name {!r}'.format(entry.name))
            seen.add(entry.name)
            unknown = set(entry.tags) - set(TAGS)
            if unknown:
                raise ContractError('{}: unknown tags {}'.format(entry.name, sorted(unknown)))
            if entry.prunable and entry.tags & NON_PRUNABLE_TAGS:
                raise ContractError('{}: bias and batch-norm entries cannot be prunable'.format(entry.name))
        self._entries = list(entries)
        self._index = {entry.name: i for i, entry in enumerate(self._entries)}

    @classmethod
    def from_arrays(cls, arrays, prunable=None, tags=None):
        """
        Builds a set from plain arrays.

        Args:
            arrays (dict): Ordered mapping name -> array-like
            prunable (dict, optional): name -> bool. Defaults to prunable for
                every entry not tagged as bias or batch-norm.
            tags (dict, optional): name -> iterable of tags. Defaults to
                ``{'weight'}``.

        Returns:
            ParamSet: New set of leaf tensors requiring gradients
        """
        entries = []
        for name, values in arrays.items():
            entry_tags = frozenset(tags[name]) if tags and name in tags else frozenset(('weight',))
            if prunable and name in prunable:
                is_prunable = bool(prunable[name])
            else:
                is_prunable = 'weight' in entry_tags and not entry_tags & NON_PRUNABLE_TAGS
            entries.append(ParamEntry(name, Tensor(values, requires_grad=True), is_prunable, entry_tags))
        return cls(entries)

    @property
    def entries(self):
        return list(self._entries)

    @property
    def names(self):
        return [entry.name for entry in self._entries]

    @property
    def layer_tags(self):
        return {entry.name: entry.tags for entry in self._entries}

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name):
        return self.entry(name).tensor

    def entry(self, name):
        try:
            return self._entries[self._index[name]]
        except KeyError:
            raise KeyError('no parameter named {!r}'.format(name))

    def arrays(self):
        return {entry.name: entry.tensor.data for entry in self._entries}

    def prunable_names(self):
        return [entry.name for entry in self._entries if entry.prunable]

    @property
    def num_prunable(self):
        return int(sum(entry.tensor.size for entry in self._entries if entry.prunable))

    @property
    def size(self):
        return int(sum(entry.tensor.size for entry in self._entries))

    def with_values(self, values):
        """
        Same names, flags and tags with new values.

        Args:
            values (dict): name -> array for the entries to replace; entries
                not mentioned keep their current values

        Returns:
            ParamSet: New set of fresh leaf tensors
        """
        entries = []
        for entry in self._entries:
            if entry.name in values:
                new = np.asarray(values[entry.name], dtype=np.float64)
                if new.shape != entry.tensor.shape:
                    raise ShapeError('{}: expected shape {}, got {}'.format(
                        entry.name, entry.tensor.shape, new.shape))
            else:
                new = entry.tensor.data
            entries.append(ParamEntry(entry.name, Tensor(new, requires_grad=True), entry.prunable, entry.tags))
        return ParamSet(entries)

    def leaves(self):
        """
        Returns:
            ParamSet: Copy with fresh leaf tensors and empty gradient slots
        """
        return self.with_values({})

    def grads(self):
        """
        Collects the gradient slots of this set's tensors.

        Returns:
            ParamSet: Gradients shaped like the parameters; entries whose
            slot is empty (detached from the loss) are zero.
        """
        values = {}
        for entry in self._entries:
            grad = entry.tensor.grad
            values[entry.name] = np.zeros(entry.tensor.shape) if grad is None else grad
        return self.with_values(values)

    def map(self, fn, names=None):
        """
        Args:
            fn (callable): ``fn(entry, array) -> array``
            names (iterable, optional): Restrict to these entries; others
                are copied unchanged

        Returns:
            ParamSet: Result of applying ``fn`` entry by entry
        """
        selected = set(self.names if names is None else names)
        return self.with_values({
            entry.name: fn(entry, entry.tensor.data)
            for entry in self._entries if entry.name in selected
        })

    def _check_compatible(self, other):
        if self.names != other.names:
            raise ShapeError('parameter sets have different entries')
        for a, b in zip(self._entries, other._entries):
            if a.tensor.shape != b.tensor.shape:
                raise ShapeError('{}: shapes {} and {} differ'.format(a.name, a.tensor.shape, b.tensor.shape))

    def combine(self, other, fn):
        self._check_compatible(other)
        theirs = other.arrays()
        return self.map(lambda entry, mine: fn(mine, theirs[entry.name]))

    def add(self, other, alpha=1.0):
        """
        Returns:
            ParamSet: ``self + alpha * other``
        """
        if alpha == 1.0:
            return self.combine(other, lambda a, b: a + b)
        return self.combine(other, lambda a, b: a + alpha * b)

    def scale(self, factor):
        return self.map(lambda entry, a: a * factor)

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays().values())))

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def flatten(self):
        return np.concatenate([entry.tensor.data.reshape(-1) for entry in self._entries])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeError('flat vector has shape {}, expected ({},)'.format(vector.shape, self.size))
        values = {}
        offset = 0
        for entry in self._entries:
            n = entry.tensor.size
            values[entry.name] = vector[offset:offset + n].reshape(entry.tensor.shape)
            offset += n
        return self.with_values(values)

    def equal(self, other):
        """
        Bitwise equality of names, shapes and values.
        """
        if self.names != other.names:
            return False
        return all(
            a.tensor.shape == b.tensor.shape and a.tensor.data.tobytes() == b.tensor.data.tobytes()
            for a, b in zip(self._entries, other._entries)
        )
