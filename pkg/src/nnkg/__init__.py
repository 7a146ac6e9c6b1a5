"""Neural logical operators for multi-hop query answering over knowledge graphs.

Submodules are imported on demand so that the command line can apply its
thread setting before numpy starts.
"""

__version__ = "0.1.0"
