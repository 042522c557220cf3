try:
    # The version file is generated automatically by setuptools_scm
    from evofed._version import version as __version__
except ImportError:
    __version__ = "unknown"

from evofed.experiment import compare, run, verify_accounting
