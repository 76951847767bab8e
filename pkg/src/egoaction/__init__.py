"""Two-stream CNN-LSTM recognition of egocentric actions, in numpy.

Modules: ``dataset_io`` (manifests, LOSO splits), ``optical_flow``,
``ego_compensation``, ``preprocessing``, ``nn`` (layers, gradient checks,
checkpoints), ``model``, ``training``, ``evaluation``, ``synth`` (synthetic
benchmark), ``pipeline``/``cli`` (cached end-to-end runs) and
``experiments`` (object-scale, curriculum and compensation studies).
"""
__version__ = "0.1.0"
