"""
The ``cramkit`` trains small classifiers that stay accurate after one-shot
compression. It ships a reverse-mode autodiff engine, a batch-normalized MLP,
Top-K, N:M and quantization operators, the compression-aware optimizer family
with its baselines, batch-norm tuning and one-shot sparsity sweeps.
"""
import cramkit.variables
from cramkit.errors import *
from cramkit.tensor import *
from cramkit.gradcheck import *
from cramkit.params import *
from cramkit.objective import *
from cramkit.model import *
from cramkit.compression import *
from cramkit.optimizers import *
from cramkit.danskin import *
from cramkit.data import *
from cramkit.checkpoint import *
from cramkit.harness import *
from cramkit.config import *

__version__ = cramkit.variables.LIBRARY_VERSION
