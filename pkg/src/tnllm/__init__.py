"""Linear-attention language model engine in numpy.

Submodules: ``numerics`` (array helpers, tensor files, memory counters),
``positional`` (decay schedule, relative rotations), ``attention``
(reference and blocked kernels), ``blocks`` (norms and mixers), ``model``
(language model, training, checkpoints), ``inference`` (recurrent
decoding), ``parallel_sim`` (simulated tensor parallelism) and the
``bench`` / ``verify`` / ``cli`` tooling.
"""

__version__ = "0.1.0"
