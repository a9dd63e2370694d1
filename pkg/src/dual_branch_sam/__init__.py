try:
    from dual_branch_sam._version import version as __version__
except ImportError:
    __version__ = "0.0.0"
