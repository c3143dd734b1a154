"""Local nonparametric meta-regression toolkit."""

try:
    from ._merlot import *  # noqa: F401,F403
    from ._merlot import __version__  # noqa: F401
except ImportError:  # running against a build tree, module beside the package
    from _merlot import *  # noqa: F401,F403
    from _merlot import __version__  # noqa: F401
