"""RML2016.10a pickle archive to AMC1 container conversion."""

__version__ = "0.1.0"
