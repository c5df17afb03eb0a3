from Tensor import Tensor

# Parameter kinds used by the counter and the optimizer
CONV = 'conv'
BIAS = 'bias'
NORM = 'norm'
ENSEMBLE = 'ensemble'


class Parameter:
    """Named learnable array. Updates replace ``value`` with a new tensor."""

    def __init__(self, name, data, kind, decay=False):
        self.name = name
        self.kind = kind
        self.decay = decay
        self.value = Tensor(data, requires_grad=True, name=name)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.data.size

    def assign(self, data):
        self.value = Tensor(data, requires_grad=True, name=self.name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, kind={self.kind!r})"
