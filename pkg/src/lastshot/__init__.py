"""Few-shot meta-learning distilled from many-shot teacher models.

Subpackages and modules: ``numkit`` (numpy autodiff), ``taskgen`` (episodes),
``pretrain``, ``learners``, ``teachers``, ``objectives`` and ``harness``.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("lastshot")
except PackageNotFoundError:  # running from a source tree without install
    __version__ = "0.1.0"
